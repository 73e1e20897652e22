"""Round-based federated orchestration: sampling, local training, aggregation.

One process simulates the whole federation. Every source of randomness is a
generator derived from (experiment seed, stream, round, client id), and
aggregation always sums in ascending client-id order, so running the clients
of a round concurrently or serially yields identical results bit for bit.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comm import FLOAT32, BFLOAT16, CommLedger, Quantizer, meter_dense_transfer, meter_sparse_transfer
from .data import ClientShard, LabeledDataset, split_shard_validation
from .errors import ClientFailure, ConfigurationError, NumericError, RoundError
from .nn import Network, OptimizerState, forward, loss_and_backward, sgd_step
from .sparsity import (Mask, ReadjustmentSchedule, SparsityDistribution, cosine_alpha,
                       erk_distribution, prune_layerwise, readjust)

log = logging.getLogger(__name__)

# fixed stream ids for seed derivation
_STREAM_INIT = 0
_STREAM_SAMPLE = 1
_STREAM_CLIENT = 2
STREAM_PARTITION = 3
STREAM_DATA = 4

ALGORITHMS = ("fedavg", "fedavgm", "fedprox", "randommask", "feddst", "feddst_prox", "prunefl")
_MASKED = frozenset({"randommask", "feddst", "feddst_prox", "prunefl"})
_READJUSTING = frozenset({"feddst", "feddst_prox"})


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent deterministic stream for a (seed, stream, ...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass
class AlgorithmConfig:
    """Which algorithm runs and with what shared training settings.

    The momentum, learning rate, and weight decay apply to every algorithm's
    client optimizer; the proximal term applies whenever prox_mu > 0, and the
    sparsity/readjustment fields only matter for the masked algorithms.
    """

    algorithm: str = "fedavgm"
    rounds: int = 100
    clients_per_round: int = 20
    local_epochs: int = 5
    batch_size: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    sparsity: float = 0.0
    readjustment_ratio: float = 0.01
    rounds_between_readjustments: int = 10
    readjustment_end_round: int = 200
    readjustment_epoch: int | None = None
    prox_mu: float = 0.0
    upload_quantizer: str = "float32"
    prunefl_time_cost: float = 1.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigurationError(f"sparsity {self.sparsity} must lie in [0, 1)")
        if self.prox_mu < 0:
            raise ConfigurationError("prox_mu must be non-negative")
        if self.rounds < 1 or self.clients_per_round < 1 or self.batch_size < 1:
            raise ConfigurationError("rounds, clients_per_round, and batch_size must be positive")
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs cannot be negative")
        if self.prunefl_time_cost <= 0:
            raise ConfigurationError("prunefl_time_cost must be positive")
        Quantizer(self.upload_quantizer)

    @property
    def masked(self) -> bool:
        return self.algorithm in _MASKED

    @property
    def readjusts(self) -> bool:
        return self.algorithm in _READJUSTING

    @property
    def quantizer(self) -> Quantizer:
        return FLOAT32 if self.upload_quantizer == "float32" else BFLOAT16

    def schedule(self) -> ReadjustmentSchedule:
        epoch = self.readjustment_epoch
        if epoch is None:
            epoch = max(1, self.local_epochs - 1)
        if self.local_epochs > 0 and epoch > self.local_epochs:
            raise ConfigurationError(
                f"readjustment epoch {epoch} exceeds local_epochs {self.local_epochs}"
            )
        return ReadjustmentSchedule(self.rounds_between_readjustments,
                                    self.readjustment_end_round,
                                    self.readjustment_ratio, epoch)


@dataclass
class SparseModel:
    """Network parameters plus the binary mask that defines the subnetwork."""

    net: Network
    mask: Mask | None

    def clone(self) -> "SparseModel":
        return SparseModel(self.net.clone(), self.mask.copy() if self.mask else None)

    def retained_values(self) -> int:
        """Count of transmitted values: retained weights plus all biases."""
        if self.mask is None:
            return self.net.param_count
        bias = sum(p["bias"].size for p in self.net.params if "bias" in p)
        unmasked = sum(self.net.params[i]["weight"].size
                       for i in self.net.prunable_layers() if i not in self.mask.arrays)
        return self.mask.total_nnz + bias + unmasked


@dataclass
class ClientUpdate:
    """What a client sends back: new parameters, a mask only if it changed,
    and its sample count. The mean training loss and (for gradient-upload
    algorithms) the dense mean gradient ride along for the simulator."""

    params: list[dict[str, np.ndarray]]
    mask: Mask | None
    sample_count: int
    mean_loss: float = math.nan
    dense_grads: dict[int, np.ndarray] | None = None


@dataclass
class RoundMetrics:
    round_no: int
    alpha: float
    accuracy: float
    mean_loss: float
    upload_bits_cum: int
    download_bits_cum: int
    mask_flip_frac: float
    failed_clients: int


@dataclass
class ServerState:
    model: SparseModel
    round_no: int
    base_dist: SparsityDistribution | None
    seed: int
    ledger: CommLedger
    mask_changed_last_round: bool = True


def sample_clients(num_clients: int, clients_per_round: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement, returned in ascending id order."""
    if clients_per_round > num_clients:
        raise ConfigurationError(
            f"cannot sample {clients_per_round} clients from a pool of {num_clients}"
        )
    return np.sort(rng.choice(num_clients, size=clients_per_round, replace=False))


def _prox_grads(net: Network, server_params, mu: float):
    return [{name: mu * (w - server_params[i][name]) for name, w in p.items()}
            for i, p in enumerate(net.params)]


def client_update(shard: ClientShard, model: SparseModel, cfg: AlgorithmConfig,
                  round_no: int, dataset: LabeledDataset,
                  base_dist: SparsityDistribution | None, rng: np.random.Generator,
                  collect_dense_grads: bool = False) -> ClientUpdate:
    """Run one client's local epochs and return its update.

    Momentum starts at zero (clients are stateless between selections).
    Gradients are computed densely and masked at the update step; on
    readjustment rounds the dense gradient of the last step of epoch E_p
    drives regrowth, always excluding any proximal term.
    """
    net = model.net.clone()
    mask = model.mask.copy() if model.mask is not None else None
    received_mask = model.mask
    epochs = cfg.local_epochs
    if epochs == 0:
        return ClientUpdate(net.params_copy(), None, shard.n_c)

    opt = OptimizerState.for_network(net, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    server_params = model.net.params_copy() if cfg.prox_mu > 0 else None
    schedule = cfg.schedule()
    readjust_now = (cfg.readjusts and mask is not None
                    and round_no % schedule.interval == 0
                    and round_no < schedule.last_round)

    losses = []
    growth_grads = None
    grad_sum = None
    steps = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(shard.indices)
        n_batches = math.ceil(order.size / cfg.batch_size)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss = loss_and_backward(net, dataset.images[idx], dataset.labels[idx])
            losses.append(loss)
            if readjust_now and epoch == schedule.epoch_in_round and b == n_batches - 1:
                growth_grads = {li: net.grads[li]["weight"].copy()
                                for li in net.prunable_layers()}
            if collect_dense_grads:
                if grad_sum is None:
                    grad_sum = {li: net.grads[li]["weight"].astype(np.float64)
                                for li in net.prunable_layers()}
                else:
                    for li in net.prunable_layers():
                        grad_sum[li] += net.grads[li]["weight"]
                steps += 1
            extra = _prox_grads(net, server_params, cfg.prox_mu) if server_params else None
            sgd_step(net, opt, mask=mask, grad_extra=extra)
        if readjust_now and epoch == schedule.epoch_in_round:
            mask = readjust(net, mask, growth_grads, round_no, schedule, base_dist)

    changed = mask is not None and received_mask is not None and not (mask == received_mask)
    dense_grads = None
    if grad_sum is not None:
        dense_grads = {li: (g / steps).astype(np.float32) for li, g in grad_sum.items()}
    return ClientUpdate(net.params_copy(), mask.copy() if changed else None,
                        shard.n_c, float(np.mean(losses)), dense_grads)


def aggregate_dense(updates: list[ClientUpdate], prev_params) -> list[dict[str, np.ndarray]]:
    """Sample-count weighted average of client parameters."""
    if not updates:
        raise RoundError("no client updates to aggregate")
    numer = [{k: np.zeros(v.shape, np.float64) for k, v in p.items()} for p in prev_params]
    denom = np.float64(0.0)
    for upd in updates:
        w = np.float64(upd.sample_count)
        denom = denom + w
        for i, p in enumerate(upd.params):
            for name, arr in p.items():
                numer[i][name] += w * arr
    return [{name: (acc / denom).astype(np.float32) for name, acc in layer.items()}
            for layer in numer]


def aggregate_sparse(updates: list[ClientUpdate], prev_model: SparseModel) -> list[dict[str, np.ndarray]]:
    """Per-index weighted average counting only clients whose mask retains it.

    Updates without an explicit mask reuse the server mask. Where no client
    retains an index, the previous server value (already masked) carries over.
    """
    if not updates:
        raise RoundError("no client updates to aggregate")
    prev_params = prev_model.net.params
    prunable = set(prev_model.net.prunable_layers()) if prev_model.mask else set()
    numer = [{k: np.zeros(v.shape, np.float64) for k, v in p.items()} for p in prev_params]
    denom = [{k: np.zeros(v.shape, np.float64) for k, v in p.items()} for p in prev_params]
    for upd in updates:
        w = np.float64(upd.sample_count)
        mask = upd.mask if upd.mask is not None else prev_model.mask
        for i, p in enumerate(upd.params):
            for name, arr in p.items():
                term = w * arr
                cover = w
                if name == "weight" and i in prunable and mask is not None and i in mask.arrays:
                    m = mask.arrays[i]
                    term = term * m
                    cover = w * m
                numer[i][name] += term
                denom[i][name] += cover
    out = []
    for i, layer in enumerate(numer):
        agg = {}
        for name, acc in layer.items():
            d = denom[i][name]
            quot = np.divide(acc, d, out=np.zeros_like(acc), where=d > 0)
            agg[name] = np.where(d > 0, quot.astype(np.float32), prev_params[i][name])
        out.append(agg)
    return out


def server_finalize(params, template: SparseModel, dist: SparsityDistribution) -> SparseModel:
    """Layer-wise magnitude pruning of the aggregated parameters to the target."""
    net = template.net.clone()
    net.set_params(params)
    mask = prune_layerwise(net, Mask.all_ones(net), dist)
    return SparseModel(net, mask)


def evaluate(model: SparseModel, eval_set: LabeledDataset, batch_size: int = 512) -> float:
    """Top-1 accuracy of the (already masked) model on a held-out set."""
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    hits = 0
    for start in range(0, len(eval_set), batch_size):
        logits = forward(model.net, eval_set.images[start:start + batch_size])
        hits += int((logits.argmax(axis=1) == eval_set.labels[start:start + batch_size]).sum())
    return hits / len(eval_set)


def evaluate_per_client(model: SparseModel, dataset: LabeledDataset, val_shards) -> float:
    """Accuracy averaged over clients with equal weight, on local holdouts."""
    accs = []
    for shard in val_shards:
        if shard is None:
            continue
        logits = forward(model.net, dataset.images[shard.indices])
        accs.append(float((logits.argmax(axis=1) == dataset.labels[shard.indices]).mean()))
    if not accs:
        raise ValueError("no client validation shards available")
    return float(np.mean(accs))


def _select_prunefl_mask(net: Network, grads: dict[int, np.ndarray], keep_total: int,
                         time_cost: float) -> Mask:
    """Global top-k prunable indices by squared gradient over retention cost."""
    layers = net.prunable_layers()
    scores = np.concatenate([(grads[li].reshape(-1).astype(np.float64) ** 2) / time_cost
                             for li in layers])
    order = np.argsort(-scores, kind="stable")
    flat = np.zeros(scores.size, dtype=bool)
    flat[order[:keep_total]] = True
    arrays = {}
    offset = 0
    for li in layers:
        size = net.params[li]["weight"].size
        arrays[li] = flat[offset:offset + size].reshape(net.params[li]["weight"].shape)
        offset += size
    return Mask(arrays)


def run_round(state: ServerState, cfg: AlgorithmConfig, dataset: LabeledDataset,
              shards: list[ClientShard], pool: ThreadPoolExecutor | None = None,
              eval_set: LabeledDataset | None = None,
              val_shards=None) -> RoundMetrics:
    """One full round: sample, train, meter, aggregate, finalize, evaluate."""
    r = state.round_no
    ledger = state.ledger
    n_params = state.model.net.param_count
    prunefl_upload_round = cfg.algorithm == "prunefl" and r % cfg.rounds_between_readjustments == 0

    ids = sample_clients(len(shards), cfg.clients_per_round, rng_for(state.seed, _STREAM_SAMPLE, r))

    download_mask = cfg.masked and state.mask_changed_last_round
    download_bits = (meter_sparse_transfer(n_params, state.model.retained_values(), download_mask)
                     if cfg.masked else meter_dense_transfer(n_params))

    def one_client(cid: int):
        client_rng = rng_for(state.seed, _STREAM_CLIENT, r, cid)
        return client_update(shards[cid], state.model, cfg, r, dataset,
                             state.base_dist, client_rng,
                             collect_dense_grads=prunefl_upload_round)

    results: dict[int, ClientUpdate | ClientFailure] = {}
    if pool is not None:
        futures = {int(cid): pool.submit(one_client, int(cid)) for cid in ids}
        for cid, fut in futures.items():
            try:
                results[cid] = fut.result()
            except NumericError as exc:
                results[cid] = ClientFailure(cid, r, str(exc))
    else:
        for cid in ids:
            try:
                results[int(cid)] = one_client(int(cid))
            except NumericError as exc:
                results[int(cid)] = ClientFailure(int(cid), r, str(exc))

    updates: list[ClientUpdate] = []
    failed = 0
    quantizer = cfg.quantizer
    for cid in sorted(results):
        res = results[cid]
        if isinstance(res, ClientFailure):
            log.warning("dropping failed client: %s", res)
            ledger.record(r, cid, 0, download_bits, False)
            failed += 1
            continue
        if quantizer is not FLOAT32:
            res.params = [{k: quantizer.quantize(v) for k, v in p.items()} for p in res.params]
        if cfg.masked:
            retained = SparseModel(state.model.net, res.mask or state.model.mask).retained_values()
            upload_bits = meter_sparse_transfer(n_params, retained,
                                                res.mask is not None, quantizer)
        else:
            upload_bits = meter_dense_transfer(n_params, quantizer)
        if prunefl_upload_round:
            upload_bits += meter_dense_transfer(n_params)  # full dense gradient, float32
        ledger.record(r, cid, upload_bits, download_bits, res.mask is not None)
        updates.append(res)

    if not updates:
        raise RoundError(f"round {r}: all {len(ids)} sampled clients failed")

    old_mask = state.model.mask
    if cfg.masked:
        params = aggregate_sparse(updates, state.model)
        if cfg.algorithm in _READJUSTING:
            new_model = server_finalize(params, state.model, state.base_dist)
        elif prunefl_upload_round:
            total = sum(u.sample_count for u in updates)
            grads = {}
            for li in state.model.net.prunable_layers():
                acc = np.zeros(state.model.net.params[li]["weight"].shape, np.float64)
                for u in updates:
                    acc += u.sample_count * u.dense_grads[li]
                grads[li] = acc / total
            new_mask = _select_prunefl_mask(state.model.net, grads,
                                            state.base_dist.total_keep, cfg.prunefl_time_cost)
            net = state.model.net.clone()
            net.set_params(params)
            new_mask.apply(net)
            new_model = SparseModel(net, new_mask)
        else:
            # fixed-mask algorithms keep their mask bit for bit
            net = state.model.net.clone()
            net.set_params(params)
            old_mask.apply(net)
            new_model = SparseModel(net, old_mask.copy())
    else:
        params = aggregate_dense(updates, state.model.net.params)
        net = state.model.net.clone()
        net.set_params(params)
        new_model = SparseModel(net, None)

    flips = new_model.mask.hamming(old_mask) if old_mask is not None else 0
    flip_frac = flips / old_mask.total_size if old_mask is not None else 0.0
    state.model = new_model
    state.mask_changed_last_round = flips > 0
    state.round_no = r + 1

    alpha = cosine_alpha(r, cfg.schedule()) if cfg.readjusts else 0.0
    accuracy = math.nan
    if eval_set is not None:
        accuracy = evaluate(new_model, eval_set)
    elif val_shards is not None:
        accuracy = evaluate_per_client(new_model, dataset, val_shards)
    mean_loss = float(np.mean([u.mean_loss for u in updates]))
    return RoundMetrics(r, alpha, accuracy, mean_loss, ledger.total_upload_bits,
                        ledger.total_download_bits, flip_frac, failed)


def initial_server_model(net: Network, cfg: AlgorithmConfig):
    """Random dense initialization magnitude-pruned to the ERK distribution."""
    if not cfg.masked:
        return SparseModel(net, None), None
    dist = erk_distribution(net.prunable_shapes(), cfg.sparsity)
    mask = prune_layerwise(net, Mask.all_ones(net), dist)
    return SparseModel(net, mask), dist


def run_experiment(cfg: AlgorithmConfig, build_net, train_ds: LabeledDataset,
                   eval_ds: LabeledDataset | None, shards: list[ClientShard],
                   seed: int, eval_every: int = 10, workers: int = 1,
                   per_client_eval: bool = False,
                   ledger: CommLedger | None = None) -> tuple[list[RoundMetrics], CommLedger]:
    """Run R rounds and return metrics for each evaluated round.

    `build_net` maps an init seed to a fresh Network, so the whole experiment
    is a pure function of (cfg, seed). The final round is always evaluated.
    """
    if cfg.clients_per_round > len(shards):
        raise ConfigurationError(
            f"clients_per_round {cfg.clients_per_round} exceeds client pool {len(shards)}"
        )
    cfg.schedule()  # fail fast on bad E_p
    net = build_net(int(rng_for(seed, _STREAM_INIT).integers(2 ** 31)))
    model, dist = initial_server_model(net, cfg)
    ledger = ledger if ledger is not None else CommLedger()
    state = ServerState(model, 1, dist, seed, ledger)

    val_shards = None
    if per_client_eval:
        shards, val_shards = split_shard_validation(shards)

    series: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, cfg.rounds + 1):
            do_eval = (eval_every > 0 and r % eval_every == 0) or r == cfg.rounds
            metrics = run_round(
                state, cfg, train_ds, shards, pool=pool,
                eval_set=eval_ds if (do_eval and not per_client_eval) else None,
                val_shards=val_shards if (do_eval and per_client_eval) else None,
            )
            if do_eval:
                series.append(metrics)
    finally:
        if pool is not None:
            pool.shutdown()
    return series, ledger
