"""The training loop: paired-time consistency loss, KL term, optimizers, telemetry.

One step draws a time pair (r, t), a coupled noise x1 shared by both
perturbed states, evaluates the trainable branch at (x_t, t) against a
parameter-frozen branch at (x_r, r), and descends the weighted sum of the
pseudo-Huber consistency distance and the coupling's KL term. Gradients
for the consistency net and the encoder come from one joint backward pass,
are clipped by global norm, and both parameter sets keep EMA shadows.

Non-finite losses reject the step: parameters, moments and the iteration
counter stay put while the random stream advances so the next attempt
draws fresh values.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import couplings, kernels, schedules
from .autodiff import Tensor
from .config import ICT, RunConfig, config_to_dict
from .data import GaussianMixture
from .networks import (
    ConsistencyNet,
    GaussianEncoder,
    MLPSpec,
    ParamSet,
    ema_update,
)
from .rundir import MetricsWriter, RunDirectory

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive rejected (non-finite) steps."""


class CheckpointMismatch(RuntimeError):
    """Checkpoint does not belong to the supplied configuration."""


# ---------------------------------------------------------------------------
# losses and optimizers
# ---------------------------------------------------------------------------


def pseudo_huber(x: Tensor, y: Tensor, c: float, batch_axis: int | None = None) -> Tensor:
    """sqrt(||x - y||^2 + c^2) - c; the Euclidean norm when c = 0.

    With `batch_axis` set, the norm runs over the remaining axes per batch
    element and the result is the batch mean, which is the form the
    training expectation uses.
    """
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape != y.shape:
        raise ad.ShapeError(f"pseudo_huber: shapes differ, {x.shape} vs {y.shape}")
    c = float(c)
    if c < 0.0:
        raise ValueError(f"pseudo_huber constant must be non-negative, got {c}")
    sq = ad.square(ad.subtract(x, y))
    if batch_axis is None:
        root = ad.sqrt(ad.add(sq.sum(), Tensor(c * c)))
        return ad.add(root, Tensor(-c))
    axes = tuple(i for i in range(x.ndim) if i != batch_axis % x.ndim)
    per = sq.sum(axis=axes) if axes else sq
    root = ad.sqrt(ad.add(per, Tensor(c * c)))
    return ad.add(root, Tensor(-c)).mean()


def lr_schedule_inv_sqrt(lr_ref: float, i: int, i_ref: int) -> float:
    """Constant until i_ref, then lr_ref / sqrt(i / i_ref)."""
    if i < 0:
        raise ValueError(f"iteration must be non-negative, got {i}")
    if i_ref <= 0:
        raise ValueError(f"i_ref must be positive, got {i_ref}")
    return lr_ref / math.sqrt(max(i / i_ref, 1.0))


@dataclass
class OptState:
    """Adam-family first/second moments plus the shared step counter."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def zeros(params: dict[str, Tensor]) -> "OptState":
        return OptState(
            step=0,
            m={k: np.zeros(p.shape) for k, p in params.items()},
            v={k: np.zeros(p.shape) for k, p in params.items()},
        )


def optimizer_step(
    kind: str,
    opt: OptState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, Tensor], OptState]:
    """One Adam or RAdam update over a named parameter dict.

    RAdam falls back to the plain bias-corrected momentum step while the
    variance-rectification term is undefined (rho_t <= 4).
    """
    if kind not in ("adam", "radam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if set(params) != set(opt.m):
        raise ValueError("optimizer moment layout does not match the parameters")
    n = opt.step + 1
    bc1 = 1.0 - beta1**n
    bc2 = 1.0 - beta2**n
    rect = None
    if kind == "radam":
        rho_inf = 2.0 / (1.0 - beta2) - 1.0
        rho_t = rho_inf - 2.0 * n * (beta2**n) / bc2
        if rho_t > 4.0:
            rect = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
    new_p: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = beta2 * opt.v[name] + (1.0 - beta2) * g * g
        m_hat = m / bc1
        if kind == "adam":
            update = lr * m_hat / (np.sqrt(v / bc2) + eps)
        elif rect is not None:
            update = lr * rect * m_hat / (np.sqrt(v / bc2) + eps)
        else:
            update = lr * m_hat
        new_p[name] = Tensor(p.data - update)
        new_m[name] = m
        new_v[name] = v
    return new_p, OptState(step=n, m=new_m, v=new_v)


def clip_global_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the joint norm exceeds it."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# train state and setup
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    theta: ParamSet
    phi: ParamSet | None
    theta_ema: ParamSet
    phi_ema: ParamSet | None
    opt: OptState
    k: int
    rng: np.random.Generator
    grad_var_ema: float | None = None
    skipped: int = 0


@dataclass
class LossBreakdown:
    consistency: float
    kl: float
    lambda_kl: float
    total: float
    grad_norm_pre_clip: float
    lambda_ct: float = 0.0
    t: float = 0.0
    r: float = 0.0
    n_grid: int = 0
    kl_per_point_mean: float = 0.0
    skipped: bool = False


class TrainSetup:
    """Objects derived once from a RunConfig and shared by every step."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        dim = config.dataset.to_mixture().dim
        self.kernel = kernels.TransitionKernel(
            kind=config.kernel.kind,
            sigma_min=config.kernel.sigma_min,
            sigma_max=config.kernel.sigma_max,
            sigma_data=config.kernel.sigma_data,
        )
        self.net = ConsistencyNet(
            MLPSpec(
                input_dim=dim,
                hidden_dim=config.model.hidden_dim,
                depth=config.model.depth,
                time_embed_dim=config.model.time_embed_dim,
            ),
            self.kernel,
            embed_log_sigma=config.model.embed_log_sigma,
        )
        self.encoder = (
            GaussianEncoder(dim, config.encoder.hidden_dim, config.encoder.depth)
            if config.coupling == couplings.VARIATIONAL
            else None
        )
        self.steps = schedules.StepSchedule(
            s0=config.schedule.s0, s1=config.schedule.s1, total_iters=config.iterations
        )
        self.weighting = schedules.WeightingSpec(
            kind=config.weighting, beta=config.beta, sigma_data=config.kernel.sigma_data
        )
        self.dataset = GaussianMixture(config.dataset.to_mixture())
        self.ecm_stage_iters = math.ceil(config.iterations / config.schedule.rmap_stages)
        self._grid_cache: dict[int, schedules.TimeGrid] = {}

    @staticmethod
    def from_config(config: RunConfig) -> "TrainSetup":
        return TrainSetup(config)

    def grid(self, n: int) -> schedules.TimeGrid:
        g = self._grid_cache.get(n)
        if g is None:
            g = schedules.karras_grid(
                n, self.kernel.sigma_min, self.kernel.sigma_max, self.config.schedule.rho
            )
            self._grid_cache[n] = g
        return g

    def draw_pair(
        self, k: int, batch: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, int]:
        """Per-sample (r, t) vectors, per-sample lambda_ct, scalar lambda_kl."""
        sch = self.config.schedule
        if sch.mode == ICT:
            n = schedules.step_count(self.steps, k)
            grid = self.grid(n)
            idx = schedules.sample_discrete_lognormal_batch(
                grid, sch.p_mean, sch.p_std, rng, batch
            )
            r, t = grid.sigmas[idx], grid.sigmas[idx + 1]
            lam_ct = schedules.lambda_ct(self.weighting, t, r)
            lam_kl = schedules.lambda_kl(self.weighting, grid)
            return r, t, lam_ct, lam_kl, n
        t = schedules.sample_continuous_lognormal_batch(
            sch.p_mean, sch.p_std, self.kernel.sigma_min, self.kernel.sigma_max, rng, batch
        )
        r = schedules.ecm_r_mapping(
            t,
            iters=k,
            q=sch.rmap_q,
            stage_iters=self.ecm_stage_iters,
            k_param=sch.rmap_k,
            b_param=sch.rmap_b,
            sigma_min=self.kernel.sigma_min,
        )
        lam_ct = schedules.lambda_ct(self.weighting, t, r)
        lam_kl = schedules.lambda_kl(self.weighting)
        return r, t, lam_ct, lam_kl, 0

    def draw_coupling(
        self, x0: np.ndarray, phi: ParamSet | None, rng: np.random.Generator
    ) -> couplings.CouplingSample:
        kind = self.config.coupling
        if kind == couplings.INDEPENDENT:
            return couplings.independent_sample(x0, rng)
        if kind == couplings.OT:
            return couplings.ot_sample(x0, rng)
        return couplings.variational_sample(
            self.encoder, phi, x0, rng, self.config.kl_reduction
        )


def init_state(config: RunConfig) -> TrainState:
    """Deterministic initialization: one master stream seeds nets and training."""
    setup = TrainSetup(config)
    rng = np.random.default_rng(config.seed)
    theta = setup.net.init(rng)
    phi = setup.encoder.init(rng) if setup.encoder is not None else None
    params = _joint_params(theta, phi)
    return TrainState(
        theta=theta,
        phi=phi,
        theta_ema=theta.map(lambda t: Tensor(t.data.copy())),
        phi_ema=phi.map(lambda t: Tensor(t.data.copy())) if phi is not None else None,
        opt=OptState.zeros(params),
        k=0,
        rng=rng,
    )


def _joint_params(theta: ParamSet, phi: ParamSet | None) -> dict[str, Tensor]:
    params = {f"theta.{k}": v for k, v in theta.items()}
    if phi is not None:
        params.update({f"phi.{k}": v for k, v in phi.items()})
    return params


def _split_params(params: dict[str, Tensor], has_phi: bool) -> tuple[ParamSet, ParamSet | None]:
    theta = ParamSet({k[6:]: v for k, v in params.items() if k.startswith("theta.")})
    if not has_phi:
        return theta, None
    phi = ParamSet({k[4:]: v for k, v in params.items() if k.startswith("phi.")})
    return theta, phi


def _loss_and_grads(
    setup: TrainSetup,
    theta: ParamSet,
    phi: ParamSet | None,
    x0: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """One joint forward/backward pass; returns the breakdown and named grads.

    Every batch element carries its own time pair; the trainable branch
    runs at (x_t, t), the target branch reuses the same parameter values
    behind stop_gradient at (x_r, r), so the encoder still receives
    gradient through both perturbed inputs while the consistency net
    receives none from the target side.
    """
    r, t, lam_ct, lam_kl, n_grid = setup.draw_pair(k, len(x0), rng)
    c = setup.config.huber_c
    # per-op finiteness checks are off on the hot path; train_step enforces
    # finiteness of the total loss and the joint gradient norm instead, so
    # numpy's overflow warnings would be spurious here
    with ad.finite_checks(False), np.errstate(all="ignore"), ad.Tape() as tape:
        tape.watch(*theta.tensors())
        if phi is not None:
            tape.watch(*phi.tensors())
        sample = setup.draw_coupling(x0, phi, rng)
        x0_t = Tensor(x0)
        x_t = kernels.perturb(setup.kernel, x0_t, sample.x1, t)
        x_r = kernels.perturb(setup.kernel, x0_t, sample.x1, r)
        f_t = setup.net.forward(theta, x_t, t)
        frozen = theta.map(ad.stop_gradient)
        f_r = setup.net.forward(frozen, x_r, r)
        # per-sample pseudo-Huber distances, weighted by per-sample lambda_ct
        sq = ad.square(ad.subtract(f_t, f_r)).sum(axis=1)
        per = ad.add(ad.sqrt(ad.add(sq, Tensor(c * c))), Tensor(-c))
        consistency = ad.multiply(per, Tensor(lam_ct)).mean()
        total = ad.add(consistency, ad.scale(sample.aux_loss, lam_kl))
        grad_map = ad.backward(tape, total)
    grads = {f"theta.{name}": grad_map.wrt(p).data for name, p in theta.items()}
    if phi is not None:
        grads.update({f"phi.{name}": grad_map.wrt(p).data for name, p in phi.items()})
    breakdown = LossBreakdown(
        consistency=consistency.item(),
        kl=sample.aux_loss.item(),
        lambda_kl=lam_kl,
        total=total.item(),
        grad_norm_pre_clip=math.nan,
        lambda_ct=float(np.mean(lam_ct)),
        t=float(np.mean(t)),
        r=float(np.mean(r)),
        n_grid=n_grid,
        kl_per_point_mean=float(np.mean(sample.kl_per_point))
        if len(sample.kl_per_point)
        else 0.0,
    )
    return breakdown, grads


def current_lr(config: RunConfig, k: int) -> float:
    if config.optimizer.lr_schedule == "inv_sqrt":
        return lr_schedule_inv_sqrt(config.optimizer.lr, k, config.optimizer.i_ref)
    return config.optimizer.lr


def train_step(
    state: TrainState, setup: TrainSetup, x0: np.ndarray
) -> tuple[TrainState, LossBreakdown]:
    """One optimization step; rejected (non-finite) steps leave parameters,
    moments and the iteration counter unchanged while the RNG advances."""
    cfg = setup.config
    try:
        breakdown, grads = _loss_and_grads(setup, state.theta, state.phi, x0, state.k, state.rng)
        grads, pre_norm = clip_global_norm(grads, cfg.clip_norm)
        finite = math.isfinite(breakdown.total) and math.isfinite(pre_norm)
    except ad.NonFiniteError:
        finite = False
    if not finite:
        skipped = dataclasses.replace(state, skipped=state.skipped + 1)
        return skipped, LossBreakdown(
            consistency=math.nan,
            kl=math.nan,
            lambda_kl=math.nan,
            total=math.nan,
            grad_norm_pre_clip=math.nan,
            skipped=True,
        )
    breakdown.grad_norm_pre_clip = pre_norm
    params = _joint_params(state.theta, state.phi)
    new_params, new_opt = optimizer_step(
        cfg.optimizer.kind,
        state.opt,
        params,
        grads,
        lr=current_lr(cfg, state.k),
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
    )
    theta, phi = _split_params(new_params, state.phi is not None)
    theta_ema = ema_update(state.theta_ema, theta, cfg.ema_rate)
    phi_ema = (
        ema_update(state.phi_ema, phi, cfg.ema_rate) if phi is not None else None
    )
    new_state = dataclasses.replace(
        state,
        theta=theta,
        phi=phi,
        theta_ema=theta_ema,
        phi_ema=phi_ema,
        opt=new_opt,
        k=state.k + 1,
    )
    return new_state, breakdown


def grad_variance_probe(
    state: TrainState,
    setup: TrainSetup,
    batches: list[np.ndarray],
    seeds: list,
) -> float:
    """Mean per-coordinate variance of the consistency-net gradient.

    Each probe replays the full stochastic step (time pair, coupling noise)
    with its own seeded stream at fixed parameters; only theta coordinates
    enter the statistic so runs with and without an encoder stay comparable.
    Identical batches with identical seeds therefore give exactly zero.
    """
    if len(batches) < 2:
        raise ValueError(f"variance probe needs at least 2 draws, got {len(batches)}")
    if len(seeds) != len(batches):
        raise ValueError("one seed per probe batch is required")
    rows = []
    for x0, seed in zip(batches, seeds):
        rng = np.random.default_rng(seed)
        _, grads = _loss_and_grads(setup, state.theta, state.phi, x0, state.k, rng)
        rows.append(
            np.concatenate([grads[k].reshape(-1) for k in sorted(grads) if k.startswith("theta.")])
        )
    stacked = np.stack(rows)
    stacked -= stacked[0].copy()  # shift-invariant; identical draws give exactly 0
    return float(np.mean(np.var(stacked, axis=0, ddof=1)))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, config: RunConfig) -> None:
    """Single-file container: parameter/moment arrays plus a JSON header."""
    arrays: dict[str, np.ndarray] = {}
    sections = [("theta", state.theta), ("theta_ema", state.theta_ema)]
    if state.phi is not None:
        sections += [("phi", state.phi), ("phi_ema", state.phi_ema)]
    for prefix, ps in sections:
        for name, tensor in ps.items():
            arrays[f"{prefix}:{name}"] = tensor.data
    for name, arr in state.opt.m.items():
        arrays[f"m:{name}"] = arr
    for name, arr in state.opt.v.items():
        arrays[f"v:{name}"] = arr
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.k,
        "opt_step": state.opt.step,
        "rng_state": state.rng.bit_generator.state,
        "grad_var_ema": state.grad_var_ema,
        "skipped": state.skipped,
        "has_phi": state.phi is not None,
        "config": config_to_dict(config),
    }
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez_compressed(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: RunConfig | None = None) -> TrainState:
    with np.load(path, allow_pickle=False) as payload:
        meta = json.loads(str(payload["meta"][()]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise CheckpointMismatch(
                f"checkpoint version {meta['version']} unsupported (expected {CHECKPOINT_VERSION})"
            )
        if expected_config is not None:
            # normalize through JSON so tuple/list container differences vanish
            expected = json.loads(json.dumps(config_to_dict(expected_config)))
            if meta["config"] != expected:
                raise CheckpointMismatch(
                    "checkpoint was produced by a different configuration; refusing to resume"
                )
        groups: dict[str, dict[str, np.ndarray]] = {}
        for key in payload.files:
            if key == "meta":
                continue
            prefix, name = key.split(":", 1)
            groups.setdefault(prefix, {})[name] = payload[key]

    def param_set(prefix: str) -> ParamSet:
        items = sorted(groups[prefix].items(), key=_param_order)
        return ParamSet({k: Tensor(v) for k, v in items})

    has_phi = meta["has_phi"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    opt = OptState(step=meta["opt_step"], m=dict(groups["m"]), v=dict(groups["v"]))
    return TrainState(
        theta=param_set("theta"),
        phi=param_set("phi") if has_phi else None,
        theta_ema=param_set("theta_ema"),
        phi_ema=param_set("phi_ema") if has_phi else None,
        opt=opt,
        k=meta["iteration"],
        rng=rng,
        grad_var_ema=meta["grad_var_ema"],
        skipped=meta["skipped"],
    )


def _param_order(item):
    # restore the construction order w0, b0, w1, b1, ... (npz keys come back sorted)
    name = item[0]
    head = name.rstrip("0123456789")
    return (int(name[len(head):] or 0), 0 if head.endswith("w") else 1)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------


def run_training(
    config: RunConfig,
    run: RunDirectory,
    resume: bool = False,
    progress=None,
    max_consecutive_skips: int = 1000,
) -> TrainState:
    """Train to config.iterations with periodic metrics rows and checkpoints.

    Logging iterations are multiples of log_interval; each logged row also
    refreshes the checkpoint, so a killed run resumes from the last row and
    reproduces the uninterrupted trace exactly (probe RNG streams are
    derived from (seed, iteration), never from the training stream).
    """
    setup = TrainSetup(config)
    if resume:
        state = load_checkpoint(run.checkpoint_path, expected_config=config)
    else:
        state = init_state(config)
    writer = MetricsWriter(run.metrics_path, resume_from=state.k if resume else None)
    consecutive = 0
    while state.k < config.iterations:
        x0 = setup.dataset.sample(config.batch_size, state.rng)
        state, breakdown = train_step(state, setup, x0)
        if breakdown.skipped:
            consecutive += 1
            run.log_incident(
                f"iteration {state.k}: non-finite loss, step skipped "
                f"({state.skipped} total)"
            )
            if consecutive >= max_consecutive_skips:
                raise TrainingDiverged(
                    f"{consecutive} consecutive non-finite steps at iteration {state.k}"
                )
            continue
        consecutive = 0
        if state.k % config.log_interval == 0 or state.k == config.iterations:
            probe = _logged_probe(config, setup, state)
            state.grad_var_ema = (
                probe
                if state.grad_var_ema is None
                else 0.9 * state.grad_var_ema + 0.1 * probe
            )
            writer.append(
                (
                    state.k,
                    breakdown.n_grid,
                    breakdown.total,
                    breakdown.consistency,
                    breakdown.kl,
                    breakdown.lambda_kl,
                    breakdown.grad_norm_pre_clip,
                    probe,
                    state.grad_var_ema,
                    breakdown.kl_per_point_mean,
                    current_lr(config, state.k),
                    state.skipped,
                )
            )
            save_checkpoint(run.checkpoint_path, state, config)
            if progress is not None:
                progress(state, breakdown)
    save_checkpoint(run.checkpoint_path, state, config)
    return state


def _logged_probe(config: RunConfig, setup: TrainSetup, state: TrainState) -> float:
    m = config.grad_var_probes
    batch_rng = np.random.default_rng([config.seed, 0x9E3779B9, state.k])
    batches = [setup.dataset.sample(config.batch_size, batch_rng) for _ in range(m)]
    seeds = [[config.seed, state.k, j] for j in range(m)]
    return grad_variance_probe(state, setup, batches, seeds)
