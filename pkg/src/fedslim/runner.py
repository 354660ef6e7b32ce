"""Wire a config into a full federated experiment and persist its artifacts.

One call of run_experiment builds (or loads) the dataset, partitions it over
the clients, initializes the global model, runs the configured number of
rounds, and writes metrics.csv, gamma_hist.csv, summary.json and a final
model checkpoint into the output directory. Everything is deterministic in
(config, seed); client parallelism does not change any output.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_model
from .config import ExperimentConfig
from .data import DetectionDataset, encode_grid_target, load_dataset, make_dataset, partition
from .evaluation import EvalContext
from .federation import (
    ClientDataset,
    ClientState,
    ClientUpdate,
    RoundReport,
    ServerState,
    run_round,
)
from .model import ModelParams, build_model
from .reporting import GammaCsvWriter, RoundCsvWriter, gamma_histogram, write_summary

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "FEDSLIM_OUT_ROOT"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    method: str
    reports: list[RoundReport]
    params: ModelParams
    out_dir: Path | None
    updates_history: list[list[ClientUpdate]] = field(default_factory=list)
    gamma_history: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def resolve_out_dir(out: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(out)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def load_or_generate_data(config: ExperimentConfig) -> tuple[DetectionDataset, DetectionDataset]:
    """Train/test datasets, either generated from the scene spec or loaded
    from the on-disk format under dataset_dir/train and dataset_dir/test."""
    if config.dataset_dir:
        base = Path(config.dataset_dir)
        return load_dataset(base / "train"), load_dataset(base / "test")
    spec = config.scene_spec()
    full = make_dataset(spec, config.train_count + config.test_count)
    train = DetectionDataset(
        images=full.images[: config.train_count],
        annotations=full.annotations[: config.train_count],
    )
    test = DetectionDataset(
        images=full.images[config.train_count :],
        annotations=full.annotations[config.train_count :],
    )
    return train, test


def _targets_for(dataset: DetectionDataset, config: ExperimentConfig):
    return [
        encode_grid_target(anns, config.grid_size, dataset.image_size, config.num_classes)
        for anns in dataset.annotations
    ]


def build_simulation(
    config: ExperimentConfig, method: str
) -> tuple[ServerState, dict[int, ClientDataset], EvalContext]:
    train, test = load_or_generate_data(config)
    train_targets = _targets_for(train, config)

    part_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(0xDA7A,))
    )
    parts = partition(len(train), config.num_clients, part_rng)

    clients = []
    client_data: dict[int, ClientDataset] = {}
    for k, indices in enumerate(parts):
        clients.append(
            ClientState(
                client_id=k,
                sparsity_rate=config.sparsity_rates[k],
                indices=indices,
                learning_rate=config.learning_rate,
                local_epochs=config.local_epochs,
                batch_size=config.batch_size,
            )
        )
        client_data[k] = ClientDataset(
            images=train.images[indices],
            targets=[train_targets[i] for i in indices],
        )

    eval_ctx = EvalContext(
        images=test.images,
        targets=_targets_for(test, config),
        ground_truths=test.ground_truths(),
        loss_config=config.loss_config(),
        conf_threshold=config.conf_threshold,
        nms_threshold=config.nms_threshold,
    )
    server = ServerState(
        params=build_model(config.detector_config(), config.seed),
        clients=clients,
        sample_fraction=config.sample_fraction,
        seed=config.seed,
    )
    return server, client_data, eval_ctx


def run_experiment(
    config: ExperimentConfig,
    method: str | None = None,
    parallel: bool = False,
    record_updates: bool = False,
    write_artifacts: bool = True,
    out_dir=None,
) -> ExperimentResult:
    """Run all configured rounds for one method; see the module docstring."""
    method = method or config.method
    config.validate()
    server, client_data, eval_ctx = build_simulation(config, method)

    out_path: Path | None = None
    csv_writer = gamma_writer = None
    if write_artifacts:
        out_path = Path(out_dir) if out_dir is not None else resolve_out_dir(config.out)
        out_path.mkdir(parents=True, exist_ok=True)
        csv_writer = RoundCsvWriter(out_path / "metrics.csv", config.num_clients)
        gamma_writer = GammaCsvWriter(out_path / "gamma_hist.csv")

    result = ExperimentResult(
        config=config, method=method, reports=[], params=server.params, out_dir=out_path
    )
    sink: list[list[ClientUpdate]] | None = [] if record_updates else None
    try:
        for _ in range(config.rounds):
            report = run_round(
                server,
                method,
                client_data,
                eval_ctx,
                config.loss_config(),
                config.l1_lambda,
                parallel=parallel,
                update_sink=sink,
            )
            result.reports.append(report)
            counts, edges = gamma_histogram(server.params, config.gamma_bins)
            result.gamma_history.append((counts, edges))
            if csv_writer:
                csv_writer.append(report)
            if gamma_writer:
                gamma_writer.append(report.round_index, counts, edges)
            log.info(
                "round %d [%s]: map50=%.2f eval_loss=%.4f saved=%dB",
                report.round_index,
                method,
                report.map50,
                report.eval_loss,
                report.bytes_saved_round,
            )
    finally:
        if csv_writer:
            csv_writer.close()
        if gamma_writer:
            gamma_writer.close()
        if sink is not None:
            result.updates_history = sink

    if write_artifacts and out_path is not None:
        write_summary(out_path / "summary.json", config, method, result.reports)
        save_model(out_path / "model.fwm", server.params)
    return result
