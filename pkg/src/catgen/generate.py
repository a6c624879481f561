"""Reverse-diffusion inference conditioned on single-cell latents.

Target genes are split into equal-width ordered groups (one group by default,
i.e. pure conditional diffusion). Each group starts from Gaussian noise in
latent space and is fully denoised before its finalized latents join the
clean context of later groups, so generation order mirrors the causal
structure the mask enforced during training. Every group runs on its own
seeded random stream derived from (seed, group index), which keeps earlier
groups bit-identical when later groups are re-seeded.

Fractional sampling strategies denoise along their anchored timestep grid
using a respaced schedule whose cumulative signal levels match the base
schedule at every grid point.
"""

from __future__ import annotations

import numpy as np

from .arplan import ARStepPlan
from .autodiff import Tensor, concat
from .data import ST, ExpressionMatrix
from .diffusion import DiffusionSchedule, Full, Strategy, respaced_chain
from .errors import ScheduleMismatchError, ShapeMismatchError, UnknownGeneError
from .mask import build_mask
from .model import CatParameters, TokenBatch, cat_forward, decode, encode


def reverse_step(
    xt: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral denoising step from t to t-1.

    Posterior mean mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t);
    fresh noise scaled by the posterior variance
    beta_t * (1 - abar_{t-1}) / (1 - abar_t) is added except at the final step.
    """
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if xt.shape != eps_hat.shape:
        raise ShapeMismatchError(f"x_t {xt.shape} and eps_hat {eps_hat.shape} differ in shape")
    if not 1 <= t <= schedule.T:
        raise ShapeMismatchError(f"timestep {t} outside [1, {schedule.T}]")
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    ab = schedule.alpha_bars[t - 1]
    mu = (xt - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t == 1:
        return mu
    ab_prev = schedule.alpha_bars[t - 2]
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mu + np.sqrt(var) * rng.standard_normal(xt.shape)


def posterior_variance(schedule: DiffusionSchedule, t: int) -> float:
    if not 1 <= t <= schedule.T:
        raise ShapeMismatchError(f"timestep {t} outside [1, {schedule.T}]")
    if t == 1:
        return 0.0
    ab_prev = schedule.alpha_bars[t - 2]
    ab = schedule.alpha_bars[t - 1]
    return float(schedule.betas[t - 1] * (1.0 - ab_prev) / (1.0 - ab))


def equal_width_groups(n: int, groups: int) -> list[int]:
    """Split n genes into at most ``groups`` contiguous groups of near-equal size."""
    k = max(1, min(groups, n))
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def _group_rng(seed: int, index: int, group_seeds) -> np.random.Generator:
    if group_seeds is not None:
        return np.random.default_rng(int(group_seeds[index]))
    return np.random.default_rng(np.random.SeedSequence((int(seed), index)))


def generate_genes(
    sc: ExpressionMatrix,
    target_genes,
    params: CatParameters,
    schedule: DiffusionSchedule,
    groups: int = 1,
    strategy: Strategy = Full(),
    seed: int = 0,
    group_seeds=None,
    trained_T: int | None = None,
) -> ExpressionMatrix:
    """Generate spatial profiles for ``target_genes`` conditioned on ``sc``."""
    target_genes = list(target_genes)
    if not target_genes:
        raise ShapeMismatchError("no target genes requested")
    if trained_T is not None and trained_T != schedule.T:
        raise ScheduleMismatchError(
            f"checkpoint was trained with T={trained_T}, schedule has T={schedule.T}"
        )
    index = sc.gene_index()
    missing = [g for g in target_genes if g not in index]
    if missing:
        raise UnknownGeneError(f"genes absent from the SC matrix: {', '.join(missing)}")

    frozen = params.detached()
    d = frozen.cfg.d
    scale = float(frozen["latent.scale"].data)
    rows = [index[g] for g in target_genes]
    cond = encode(sc.values[rows], "sc", frozen).z.data / scale  # (S, d) deterministic

    sizes = equal_width_groups(len(target_genes), groups)
    grid, chain = respaced_chain(schedule, strategy)
    bounds = np.concatenate(([0], np.cumsum(sizes)))

    finalized: list[np.ndarray] = []
    for g, size in enumerate(sizes):
        rng = _group_rng(seed, g, group_seeds)
        lo, hi = int(bounds[g]), int(bounds[g + 1])
        plan = ARStepPlan(S=hi, sz=tuple(sizes[: g + 1]))
        mask = build_mask(hi, len(target_genes), plan)
        clean = np.vstack(finalized) if finalized else np.zeros((0, d))
        x = rng.standard_normal((size, d))
        for k in range(len(grid), 0, -1):
            eps_hat = _predict_noise(
                x, int(grid[k - 1]), schedule, cond, clean, plan, mask, frozen, lo, hi
            )
            x = reverse_step(x, k, eps_hat, chain, rng)
        finalized.append(x)

    latents = np.vstack(finalized) * scale
    values = np.clip(decode(latents, frozen).data, 0.0, None)
    obs_ids = [f"spot{j}" for j in range(frozen.cfg.p)]
    return ExpressionMatrix(
        gene_ids=target_genes, obs_ids=obs_ids, values=values, modality=ST
    )


def _predict_noise(
    x: np.ndarray,
    t_raw: int,
    schedule: DiffusionSchedule,
    cond: np.ndarray,
    clean: np.ndarray,
    plan: ARStepPlan,
    mask,
    frozen: CatParameters,
    lo: int,
    hi: int,
) -> np.ndarray:
    """CAT noise prediction for the current group's noisy latents.

    The sequence replays the training layout for the accumulated plan: noisy
    slots of already-finalized groups are fed as zeros, which the mask makes
    invisible to the current group, and only the current group's rows of the
    prediction are consumed.
    """
    S = plan.S
    c = cond.shape[0]
    v = S - plan.sz[-1]
    raw = np.zeros((S, frozen.cfg.d))
    raw[lo:hi] = x
    noisy_in = raw + cond[:hi]  # condition injection ties noisy slots to their genes
    tokens = concat([Tensor(cond), Tensor(clean[:v]), Tensor(noisy_in)], axis=0)
    kinds = np.concatenate([np.zeros(c), np.ones(v), np.full(S, 2)]).astype(np.int8)
    timesteps = np.full(S, t_raw, dtype=np.int64)
    batch = TokenBatch(
        tokens=tokens,
        kinds=kinds,
        plan=plan,
        timesteps=timesteps,
        noisy=Tensor(raw),
        alpha_bars=np.full(S, schedule.alpha_bars[t_raw - 1]),
    )
    pred = cat_forward(batch, mask, frozen)
    return pred.data[lo:hi]
