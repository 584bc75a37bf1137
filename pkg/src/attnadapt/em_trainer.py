"""Target-network training: supervised CE, EM on unlabeled streams, full objective.

The labeled streams (real source, synthetic target) get plain cross-entropy.
The unlabeled streams are trained by modified EM: a frozen posterior network
estimates p(z|x) for real target images (its translation partner shares the
posterior), low-confidence samples are filtered out, and the weighted
log-likelihood is maximized. The posterior network re-syncs with the target
network every sync_period steps, optionally resetting the LR schedule.

The full objective is ce + em + beta * alignment, optimized on the target
network only; the source network and the posterior network never receive
gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from .attention import attention_discrepancy_loss
from .datagen import Batch, BatchComposition, Dataset, compose_batch
from .model import ConvNetSpec, Network, ParamsSnapshot, build_network, snapshot_params, sync_params


@dataclass(frozen=True)
class ScheduleConfig:
    """Step-decay learning rate: lr0 * gamma ** (progress // decay_every)."""

    name: str = "step_decay"
    lr0: float = 1e-3
    gamma: float = 0.5
    decay_every: int = 1000

    def __post_init__(self):
        if self.name not in ("step_decay", "constant"):
            raise ValueError(f"unknown schedule {self.name!r}")
        if self.lr0 <= 0 or self.decay_every <= 0 or not 0 < self.gamma <= 1:
            raise ValueError(f"invalid schedule parameters: {self}")

    def lr_at(self, progress: int) -> float:
        if self.name == "constant":
            return self.lr0
        return self.lr0 * self.gamma ** (progress // self.decay_every)

    def to_dict(self) -> dict:
        return {"name": self.name, "lr0": self.lr0, "gamma": self.gamma, "decay_every": self.decay_every}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScheduleConfig":
        return cls(str(d["name"]), float(d["lr0"]), float(d["gamma"]), int(d["decay_every"]))


@dataclass(frozen=True)
class EMConfig:
    sync_period: int = 500
    p_t: float = 0.95
    p_t_initial: float = 1.0
    beta: float = 1.0
    lr_schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    reset_lr_on_sync: bool = True

    def __post_init__(self):
        if self.sync_period < 1:
            raise ValueError(f"sync_period must be >= 1, got {self.sync_period}")
        for name in ("p_t", "p_t_initial"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")

    def to_dict(self) -> dict:
        return {
            "sync_period": self.sync_period,
            "p_t": self.p_t,
            "p_t_initial": self.p_t_initial,
            "beta": self.beta,
            "lr_schedule": self.lr_schedule.to_dict(),
            "reset_lr_on_sync": self.reset_lr_on_sync,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EMConfig":
        return cls(
            sync_period=int(d["sync_period"]),
            p_t=float(d["p_t"]),
            p_t_initial=float(d["p_t_initial"]),
            beta=float(d["beta"]),
            lr_schedule=ScheduleConfig.from_dict(d["lr_schedule"]),
            reset_lr_on_sync=bool(d["reset_lr_on_sync"]),
        )


@dataclass(frozen=True)
class TrainFlags:
    """Ablation switches and the alignment measure/representation choice."""

    use_at: bool = True
    use_filter: bool = True
    use_lr_reset: bool = True
    measure: str = "l2"
    attention_mode: str = "sumsq"
    layer_set: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        object.__setattr__(self, "layer_set", tuple(self.layer_set))

    def to_dict(self) -> dict:
        return {
            "use_at": self.use_at,
            "use_filter": self.use_filter,
            "use_lr_reset": self.use_lr_reset,
            "measure": self.measure,
            "attention_mode": self.attention_mode,
            "layer_set": list(self.layer_set),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainFlags":
        return cls(
            use_at=bool(d["use_at"]),
            use_filter=bool(d["use_filter"]),
            use_lr_reset=bool(d["use_lr_reset"]),
            measure=str(d["measure"]),
            attention_mode=str(d["attention_mode"]),
            layer_set=tuple(int(v) for v in d["layer_set"]),
        )


@dataclass
class PosteriorBatch:
    """Detached category distributions for unlabeled samples plus confidence mask."""

    probs: torch.Tensor  # (n, K)
    mask: torch.Tensor  # (n,) bool: max prob >= threshold
    source_step: int


@dataclass
class MetricsRecord:
    step: int
    ce: float
    em: float
    at: float
    kept_fraction: float
    lr: float
    sync_event: bool
    eval_source_acc: float | None = None
    eval_target_acc: float | None = None
    wall_clock: float = 0.0

    def to_json_dict(self) -> dict:
        d = {
            "step": self.step,
            "ce": self.ce,
            "em": self.em,
            "at": self.at,
            "kept_fraction": self.kept_fraction,
            "lr": self.lr,
            "sync_event": self.sync_event,
            "wall_clock": self.wall_clock,
        }
        if self.eval_source_acc is not None:
            d["eval_source_acc"] = self.eval_source_acc
        if self.eval_target_acc is not None:
            d["eval_target_acc"] = self.eval_target_acc
        return d


@dataclass
class TrainerState:
    step: int
    net: Network
    m_post: Network
    post_snapshot: ParamsSnapshot
    source_net: Network
    source_snapshot: ParamsSnapshot
    optimizer: torch.optim.Optimizer
    sched_progress: int
    last_sync_step: int
    seed: int


def estimate_posterior(m_post: Network, x, p_t: float, source_step: int = 0) -> PosteriorBatch:
    """Softmax posteriors from the frozen posterior network, no gradients.

    With uniform class and data priors the normalized posterior is the
    network's own predictive distribution, so no extra constant appears.
    """
    dtype = next(m_post.parameters()).dtype
    x = torch.as_tensor(x, dtype=dtype)
    with torch.no_grad():
        probs = F.softmax(m_post(x), dim=1)
        mask = probs.max(dim=1).values >= p_t if probs.shape[0] else torch.zeros(0, dtype=torch.bool)
    return PosteriorBatch(probs=probs, mask=mask, source_step=source_step)


def _validate_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"labels out of range [0, {num_classes})")


def _ce_from_log_probs(log_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return -log_probs.gather(1, labels[:, None]).squeeze(1).mean()


def _em_from_log_probs(
    lp_target: torch.Tensor, lp_synth: torch.Tensor, posterior: PosteriorBatch
) -> torch.Tensor:
    kept = posterior.mask
    if kept.shape[0] != lp_target.shape[0]:
        raise ValueError("posterior does not match the batch")
    if not bool(kept.any()):
        return torch.zeros((), dtype=lp_target.dtype)
    q = posterior.probs.detach().to(lp_target.dtype)
    per_sample = (q * (lp_target + lp_synth)).sum(dim=1)
    return -per_sample[kept].mean()


def em_loss(target_net: Network, x_t, x_synth_s, posterior: PosteriorBatch) -> torch.Tensor:
    """Posterior-weighted log-likelihood loss over kept target/synthetic pairs."""
    dtype = next(target_net.parameters()).dtype
    x_t = torch.as_tensor(x_t, dtype=dtype)
    x_s = torch.as_tensor(x_synth_s, dtype=dtype)
    if x_t.shape[0] != x_s.shape[0]:
        raise ValueError(f"pairing mismatch: {x_t.shape[0]} target rows vs {x_s.shape[0]} synthetic rows")
    if posterior.probs.shape[0] != x_t.shape[0]:
        raise ValueError("posterior does not match the batch")
    if x_t.shape[0] == 0 or not bool(posterior.mask.any()):
        return torch.zeros((), dtype=dtype)
    log_probs = F.log_softmax(target_net(torch.cat([x_t, x_s])), dim=1)
    return _em_from_log_probs(log_probs[: x_t.shape[0]], log_probs[x_t.shape[0] :], posterior)


def supervised_ce_loss(target_net: Network, x_s, x_synth_t, labels, labels_synth=None) -> torch.Tensor:
    """Mean cross-entropy on real source plus mean cross-entropy on synth target.

    With labels_synth omitted the two streams are elementwise pairs sharing
    one label vector; passing labels_synth allows independent stream sizes.
    """
    dtype = next(target_net.parameters()).dtype
    x_s = torch.as_tensor(x_s, dtype=dtype)
    x_t = torch.as_tensor(x_synth_t, dtype=dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels_synth is None:
        if x_s.shape[0] != x_t.shape[0]:
            raise ValueError("paired call requires equal stream sizes (or pass labels_synth)")
        labels_synth = labels
    labels_synth = torch.as_tensor(labels_synth, dtype=torch.long)
    k = target_net.spec.num_classes
    _validate_labels(labels, k)
    _validate_labels(labels_synth, k)
    if labels.shape[0] != x_s.shape[0] or labels_synth.shape[0] != x_t.shape[0]:
        raise ValueError("label counts must match their streams")
    total = torch.zeros((), dtype=dtype)
    if x_s.shape[0]:
        total = total + _ce_from_log_probs(F.log_softmax(target_net(x_s), dim=1), labels)
    if x_t.shape[0]:
        total = total + _ce_from_log_probs(F.log_softmax(target_net(x_t), dim=1), labels_synth)
    return total


def full_objective(ce, em, at_loss, beta: float):
    """ce + em + beta * at_loss."""
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    return ce + em + beta * at_loss


def maybe_sync_posterior(state: TrainerState, config: EMConfig) -> bool:
    """At multiples of sync_period, refresh the posterior network's parameters.

    Returns True when a sync happened. Resets the LR schedule progress when
    configured to.
    """
    if state.step % config.sync_period != 0:
        return False
    state.post_snapshot = snapshot_params(state.net)
    sync_params(state.m_post, state.post_snapshot)
    state.last_sync_step = state.step
    if config.reset_lr_on_sync:
        state.sched_progress = 0
    return True


def effective_threshold(config: EMConfig, flags: TrainFlags, step: int) -> float:
    """Confidence threshold for a step: warmup value before the first re-sync."""
    if not flags.use_filter:
        return 0.0
    return config.p_t_initial if step < config.sync_period else config.p_t


def _slice_taps(taps: Mapping[int, torch.Tensor], lo: int, hi: int) -> dict[int, torch.Tensor]:
    return {layer: t[lo:hi] for layer, t in taps.items()}


def train_step(
    state: TrainerState,
    batch: Batch,
    config: EMConfig,
    flags: TrainFlags,
    posterior_override: PosteriorBatch | None = None,
) -> tuple[TrainerState, MetricsRecord]:
    """One optimization step of the full objective on the target network.

    posterior_override replaces the posterior-network estimate (used by the
    supervised-equivalence oracle tests).
    """
    t_start = time.perf_counter()
    eff_config = replace(config, reset_lr_on_sync=config.reset_lr_on_sync and flags.use_lr_reset)
    synced = maybe_sync_posterior(state, eff_config)

    lr = config.lr_schedule.lr_at(state.sched_progress)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    dtype = next(state.net.parameters()).dtype
    rs, st, rt, ss = batch.real_source, batch.synth_target, batch.real_target, batch.synth_source
    n_rs, n_st, n_ss, n_rt = len(rs), len(st), len(ss), len(rt)

    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    target_in = torch.cat([as_t(rs.pixels), as_t(st.pixels), as_t(ss.pixels), as_t(rt.pixels), as_t(rt.partner_pixels)])
    fwd = state.net.forward_with_taps(target_in)
    log_probs = F.log_softmax(fwd.logits, dim=1)

    # slice offsets into the fused target forward
    o_st = n_rs
    o_ss = o_st + n_st
    o_rt = o_ss + n_ss
    o_rtp = o_rt + n_rt
    o_end = o_rtp + n_rt

    ce = torch.zeros((), dtype=dtype)
    k = state.net.spec.num_classes
    if n_rs:
        labels = torch.as_tensor(rs.labels, dtype=torch.long)
        _validate_labels(labels, k)
        ce = ce + _ce_from_log_probs(log_probs[:n_rs], labels)
    if n_st:
        labels = torch.as_tensor(st.labels, dtype=torch.long)
        _validate_labels(labels, k)
        ce = ce + _ce_from_log_probs(log_probs[o_st:o_ss], labels)

    if posterior_override is not None:
        posterior = posterior_override
    else:
        threshold = effective_threshold(config, flags, state.step)
        posterior = estimate_posterior(state.m_post, as_t(rt.pixels), threshold, state.last_sync_step)
    em = (
        _em_from_log_probs(log_probs[o_rt:o_rtp], log_probs[o_rtp:o_end], posterior)
        if n_rt
        else torch.zeros((), dtype=dtype)
    )
    kept_fraction = float(posterior.mask.to(torch.float64).mean()) if n_rt else 0.0

    at = torch.zeros((), dtype=dtype)
    if flags.use_at:
        with torch.no_grad():
            src_in = torch.cat([as_t(rs.pixels), as_t(st.partner_pixels), as_t(ss.pixels), as_t(rt.partner_pixels)])
            src_fwd = state.source_net.forward_with_taps(src_in)
        s_st, s_ss, s_rtp = n_rs, n_rs + n_st, n_rs + n_st + n_ss
        source_groups = [
            _slice_taps(src_fwd.taps, 0, n_rs),
            _slice_taps(src_fwd.taps, s_st, s_ss),
            _slice_taps(src_fwd.taps, s_ss, s_rtp),
            _slice_taps(src_fwd.taps, s_rtp, s_rtp + n_rt),
        ]
        target_groups = [
            _slice_taps(fwd.taps, 0, n_rs),
            _slice_taps(fwd.taps, o_st, o_ss),
            _slice_taps(fwd.taps, o_ss, o_rt),
            _slice_taps(fwd.taps, o_rt, o_rtp),
        ]
        if config.beta > 0:
            at = attention_discrepancy_loss(
                source_groups, target_groups, flags.measure, flags.attention_mode, flags.layer_set
            )
        else:  # measured for the record, kept out of the graph
            with torch.no_grad():
                at = attention_discrepancy_loss(
                    source_groups, target_groups, flags.measure, flags.attention_mode, flags.layer_set
                )

    loss = full_objective(ce, em, at if config.beta > 0 else torch.zeros((), dtype=dtype), config.beta)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()

    record = MetricsRecord(
        step=state.step,
        ce=float(ce.detach()),
        em=float(em.detach()),
        at=float(at.detach()),
        kept_fraction=kept_fraction,
        lr=lr,
        sync_event=synced,
        wall_clock=time.perf_counter() - t_start,
    )
    state.step += 1
    state.sched_progress += 1
    return state, record


def init_trainer_state(
    source_snapshot: ParamsSnapshot,
    spec: ConvNetSpec,
    config: EMConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> TrainerState:
    """Target network initialized from the trained source snapshot."""
    if source_snapshot.spec_hash != spec.spec_hash():
        raise ValueError("source snapshot does not match the network spec")
    net = build_network(spec, seed=seed, dtype=dtype)
    sync_params(net, source_snapshot)
    source_net = build_network(spec, seed=seed, dtype=dtype)
    sync_params(source_net, source_snapshot)
    for p in source_net.parameters():
        p.requires_grad_(False)
    m_post = build_network(spec, seed=seed, dtype=dtype)
    sync_params(m_post, source_snapshot)
    for p in m_post.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr_schedule.lr0)
    return TrainerState(
        step=0,
        net=net,
        m_post=m_post,
        post_snapshot=snapshot_params(net),
        source_net=source_net,
        source_snapshot=source_snapshot,
        optimizer=optimizer,
        sched_progress=0,
        last_sync_step=0,
        seed=seed,
    )


EvalHook = Callable[[Network], tuple[float, float]]


def run_training(
    source_snapshot: ParamsSnapshot,
    spec: ConvNetSpec,
    streams: tuple[Dataset, Dataset, Dataset, Dataset],
    comp: BatchComposition,
    config: EMConfig,
    flags: TrainFlags,
    steps: int,
    seed: int,
    eval_every: int = 0,
    eval_hook: EvalHook | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[Network, list[MetricsRecord]]:
    """Adaptation loop: deterministic given (streams, config, flags, steps, seed).

    eval_hook(net) -> (source_test_acc, target_test_acc) is invoked every
    eval_every steps and at the final step; its results are attached to the
    step's MetricsRecord.
    """
    if source_snapshot is None:
        raise ValueError("run_training requires a trained source snapshot")
    state = init_trainer_state(source_snapshot, spec, config, seed, dtype)
    records: list[MetricsRecord] = []
    for t in range(steps):
        batch = compose_batch(streams, comp, seed, t)
        state, record = train_step(state, batch, config, flags)
        if eval_hook is not None and eval_every > 0 and ((t + 1) % eval_every == 0 or t == steps - 1):
            src_acc, tgt_acc = eval_hook(state.net)
            record.eval_source_acc = src_acc
            record.eval_target_acc = tgt_acc
        records.append(record)
    return state.net, records
