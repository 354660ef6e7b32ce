"""Round-based federated training over simulated clients.

Each round the server samples clients, every sampled client trains the
current global model locally (masking it first with the channel mask it
retained from the previous round, when running a sparse method), prunes by
its own sparsity rate, and returns the masked parameters. The server then
aggregates in ascending client-id order:

  * fedavg / s-fedavg: weights proportional to client dataset sizes;
  * s-fedweg: weights proportional to the inverse sparsity rates of the
    sampled clients only, one scalar weight per client applied to the whole
    masked vector (coordinates pruned by every client aggregate to 0).

Aggregation computes sum(u_k * x_k) / sum(u_k) with the raw weights first
normalized by their maximum, so equal raw weights degenerate bitwise to the
plain sequential mean regardless of scale.

Client updates may run in parallel threads; per-client RNG streams are
derived from (seed, round, client_id) and results are merged in client-id
order, so parallelism never changes any output.

Communication accounting charges 4 bytes per pruned (untransmitted) weight
and subtracts a mask-bitmap overhead of ceil(prunable_channels / 8) bytes
per client per round.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, ShapeError, Tensor, add, backward
from .detection import GridTarget, LossConfig, LossDiagnostics, yolo_loss
from .evaluation import EvalContext
from .model import ModelParams, forward, sgd_step
from .sparsify import (
    SparseMask,
    apply_mask,
    build_mask,
    global_threshold,
    l1_penalty,
    prunable_channel_total,
    prune_report,
    validate_sparsity,
)

log = logging.getLogger(__name__)

METHODS = ("fedavg", "s-fedavg", "s-fedweg")

WEIGHT_BYTES = 4  # float32 on the wire


class RoundError(RuntimeError):
    """Raised when a round cannot produce an aggregate (all clients failed)."""


@dataclass
class ClientState:
    client_id: int
    sparsity_rate: float
    indices: list[int]
    learning_rate: float
    local_epochs: int
    batch_size: int
    retained_mask: SparseMask | None = None

    def validate(self) -> None:
        validate_sparsity(self.sparsity_rate)
        if not self.indices:
            raise ValueError(f"client {self.client_id} has an empty dataset partition")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError(f"client {self.client_id}: epochs and batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"client {self.client_id}: learning rate must be positive")


@dataclass
class ClientDataset:
    images: np.ndarray  # (n, 3, H, W)
    targets: list[GridTarget]

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams | None
    mask: SparseMask | None
    loss_trace: list[float]
    pruned_count: int
    total_count: int
    data_size: int
    failed: bool = False


@dataclass
class RoundReport:
    round_index: int
    method: str
    eval_loss: float
    map50: float
    per_client_pruned: dict[int, int]
    bytes_saved_round: int
    bytes_saved_cumulative: int


@dataclass
class ServerState:
    params: ModelParams
    clients: list[ClientState]
    sample_fraction: float
    seed: int
    round_index: int = 0
    cumulative_bytes_saved: int = 0
    sampling_rng: np.random.Generator = field(init=False)

    def __post_init__(self) -> None:
        self.sampling_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(0xC11E,))
        )


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """Independent per-(round, client) stream, stable under parallel execution."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(round_index, client_id))
    )


def sample_clients(
    clients: list[ClientState], fraction: float, rng: np.random.Generator
) -> list[ClientState]:
    """Draw ceil(fraction * |K|) distinct clients, returned in ascending id order."""
    if not clients:
        raise ValueError("client registry is empty")
    if not 0 < fraction <= 1:
        raise ValueError(f"sampling fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * len(clients))
    chosen = rng.choice(len(clients), size=k, replace=False)
    return sorted((clients[i] for i in chosen), key=lambda c: c.client_id)


def edge_model_update(
    client: ClientState,
    global_params: ModelParams,
    l1_lambda: float,
    dataset: ClientDataset,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    sparse: bool,
) -> ClientUpdate:
    """Local sparse training: mask incoming globals, run E epochs of SGD on
    detection loss + L1 penalty, then threshold/mask/apply at the client rate."""
    client.validate()
    local = global_params.clone()
    if sparse and client.retained_mask is not None:
        local = apply_mask(local, client.retained_mask)

    n = len(dataset)
    diagnostics = LossDiagnostics()
    trace: list[float] = []
    for _ in range(client.local_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, client.batch_size):
            idx = order[start : start + client.batch_size]
            with GradTape() as tape:
                pred = forward(local, Tensor(dataset.images[idx]), training=True)
                loss = yolo_loss(pred, [dataset.targets[i] for i in idx], loss_cfg, diagnostics)
                if sparse and l1_lambda > 0:
                    loss = add(loss, l1_penalty(local, l1_lambda))
                value = loss.item()
                if not np.isfinite(value):
                    log.warning(
                        "client %d diverged (loss %r); excluding from this round",
                        client.client_id,
                        value,
                    )
                    return ClientUpdate(
                        client_id=client.client_id,
                        params=None,
                        mask=None,
                        loss_trace=trace,
                        pruned_count=0,
                        total_count=global_params.parameter_count(),
                        data_size=n,
                        failed=True,
                    )
                backward(loss, tape)
            sgd_step(local, client.learning_rate)
            epoch_losses.append(value)
        trace.append(float(np.mean(epoch_losses)))
    if diagnostics.sqrt_clamp_count:
        log.warning(
            "client %d: sqrt clamp fired %d times during local training",
            client.client_id,
            diagnostics.sqrt_clamp_count,
        )

    if not sparse:
        return ClientUpdate(
            client_id=client.client_id,
            params=local,
            mask=None,
            loss_trace=trace,
            pruned_count=0,
            total_count=local.parameter_count(),
            data_size=n,
        )

    threshold = global_threshold(local, client.sparsity_rate)
    mask = build_mask(local, threshold, client.sparsity_rate)
    masked = apply_mask(local, mask)
    pruned, total = prune_report(mask, local)
    return ClientUpdate(
        client_id=client.client_id,
        params=masked,
        mask=mask,
        loss_trace=trace,
        pruned_count=pruned,
        total_count=total,
        data_size=n,
    )


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def normalized_weights(raw: np.ndarray) -> np.ndarray:
    """Positive weights summing to 1; exact 1/n when all raw weights are equal."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot aggregate zero updates")
    if np.any(raw <= 0) or not np.all(np.isfinite(raw)):
        raise ValueError(f"aggregation weights must be positive and finite, got {raw}")
    u = raw / raw.max()
    return u / u.sum()


def _aggregate_state(updates: list[ClientUpdate], raw: np.ndarray) -> dict[str, np.ndarray]:
    u = np.asarray(raw, dtype=np.float64)
    u = u / u.max()
    acc: dict[str, np.ndarray] = {}
    for update, uk in zip(updates, u):
        for name, arr in update.params.state_arrays():
            if name in acc:
                if acc[name].shape != arr.shape:
                    raise ShapeError(
                        f"client {update.client_id} update {name} has shape {arr.shape}, "
                        f"expected {acc[name].shape}"
                    )
                acc[name] += uk * arr
            else:
                acc[name] = uk * arr
    total = u.sum()
    return {name: a / total for name, a in acc.items()}


def fedavg_aggregate(updates: list[ClientUpdate], sizes: list[int]) -> dict[str, np.ndarray]:
    """Dataset-size weighted average of client states."""
    if len(updates) != len(sizes) or not updates:
        raise ValueError("need one dataset size per update and at least one update")
    return _aggregate_state(updates, np.asarray(sizes, dtype=np.float64))


def fedweg_aggregate(updates: list[ClientUpdate], rates: list[float]) -> dict[str, np.ndarray]:
    """Inverse-sparsity weighted average over the sampled clients only."""
    if len(updates) != len(rates) or not updates:
        raise ValueError("need one sparsity rate per update and at least one update")
    for s in rates:
        validate_sparsity(s)
    return _aggregate_state(updates, 1.0 / np.asarray(rates, dtype=np.float64))


def fedweg_weights(rates: list[float]) -> np.ndarray:
    """The per-client aggregation weights fedweg_aggregate applies."""
    for s in rates:
        validate_sparsity(s)
    return normalized_weights(1.0 / np.asarray(rates, dtype=np.float64))


def comm_accounting(update: ClientUpdate, prunable_channels: int) -> int:
    """Bytes saved by not transmitting pruned weights, net of the mask bitmap."""
    if update.mask is None:
        return 0
    return update.pruned_count * WEIGHT_BYTES - math.ceil(prunable_channels / 8)


# ---------------------------------------------------------------------------
# round engine
# ---------------------------------------------------------------------------


def run_round(
    server: ServerState,
    method: str,
    client_data: dict[int, ClientDataset],
    eval_ctx: EvalContext,
    loss_cfg: LossConfig,
    l1_lambda: float,
    parallel: bool = False,
    update_sink: list | None = None,
) -> RoundReport:
    """Advance the federation by one communication round."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    sparse = method != "fedavg"
    round_index = server.round_index + 1
    sampled = sample_clients(server.clients, server.sample_fraction, server.sampling_rng)

    def _one(client: ClientState) -> ClientUpdate:
        rng = client_rng(server.seed, round_index, client.client_id)
        return edge_model_update(
            client,
            server.params,
            l1_lambda if sparse else 0.0,
            client_data[client.client_id],
            loss_cfg,
            rng,
            sparse,
        )

    if parallel and len(sampled) > 1:
        with ThreadPoolExecutor(max_workers=len(sampled)) as pool:
            updates = list(pool.map(_one, sampled))
    else:
        updates = [_one(c) for c in sampled]

    ok = [u for u in updates if not u.failed]
    if not ok:
        raise RoundError(f"round {round_index}: every sampled client failed; global model kept")

    if method == "s-fedweg":
        by_id = {c.client_id: c for c in sampled}
        state = fedweg_aggregate(ok, [by_id[u.client_id].sparsity_rate for u in ok])
    else:
        state = fedavg_aggregate(ok, [u.data_size for u in ok])
    server.params.load_state(state)
    server.round_index = round_index

    prunable = prunable_channel_total(server.params)
    bytes_round = 0
    per_client_pruned: dict[int, int] = {}
    for client, update in zip(sampled, updates):
        per_client_pruned[client.client_id] = update.pruned_count
        if update.failed:
            continue
        client.retained_mask = update.mask
        bytes_round += comm_accounting(update, prunable)
    server.cumulative_bytes_saved += bytes_round

    if update_sink is not None:
        update_sink.append(updates)

    map50, eval_loss = eval_ctx.evaluate(server.params)
    return RoundReport(
        round_index=round_index,
        method=method,
        eval_loss=eval_loss,
        map50=map50,
        per_client_pruned=per_client_pruned,
        bytes_saved_round=bytes_round,
        bytes_saved_cumulative=server.cumulative_bytes_saved,
    )
