"""Training: reconstruction warmup for the latent space, then the blended
autoregressive-diffusion objective.

Each diffusion step draws a fresh AR plan, noises every gene group at its own
sampled timesteps, assembles [condition | clean | noisy] tokens under the
causal mask, and minimizes noise-prediction MSE (plus optional decoder
reconstruction and KL terms). Clean tokens are never noised; conditions are
never noised either. The warmup phase trains the two encoder heads and the
decoder so the latent space is fixed before diffusion training starts; unless
``train_decoder`` is set, the spatial head, variational head and decoder stay
frozen afterwards so generation always decodes from the space the model was
trained in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .arplan import ARStepPlan, generate_ar_steps
from .autodiff import Tensor, concat, gradients
from .data import ExpressionMatrix, SplitAssignment
from .diffusion import (
    DiffusionSchedule,
    linear_schedule,
    noising_coefficients,
    parse_strategy,
    sample_timesteps,
)
from .errors import DegenerateInputError, NumericFailureError, ShapeMismatchError
from .generate import generate_genes
from .granger import test_pair
from .mask import build_mask
from .metrics import pcc
from .model import (
    CatParameters,
    ModelConfig,
    TokenBatch,
    cat_forward,
    decode,
    encode,
    init_params,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_genes: int = 16
    lr: float = 2e-3
    ar_decay: float = 0.8
    train_decoder: bool = False
    variational_encoder: bool = True
    sampling: str = "full"
    seed: int = 42
    T: int = 2000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    recon_epochs: int = 150
    recon_lr: float = 3e-3
    warmup_latent_noise: float = 0.25
    val_every: int = 1
    val_sampling: str = "frac:20"
    val_ar_groups: int = 1
    gene_order: str = "random"  # random | granger
    lambda_rec: float = 1.0
    lambda_kl: float = 1e-4
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.recon_lr <= 0:
            raise ShapeMismatchError("learning rates must be positive")
        if not 0.0 < self.ar_decay <= 1.0:
            raise ShapeMismatchError(f"ar_decay must be in (0, 1], got {self.ar_decay}")
        if self.gene_order not in ("random", "granger"):
            raise ShapeMismatchError(f"unknown gene_order {self.gene_order!r}")


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: CatParameters, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            t = self._t.get(name, 0) + 1
            self._t[name] = t
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            params[name].data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}
    return grads


def diffusion_trainable(params: CatParameters, cfg: TrainConfig) -> list[str]:
    """Names updated during diffusion training.

    The encoder heads and decoder define the latent space diffusion runs in;
    they only keep training when the decoder is co-trained, otherwise the
    warmup-fitted space (and with it the conditioning) stays frozen.
    """
    frozen = ["latent."]
    if not cfg.train_decoder:
        frozen += ["e1.", "enc_var.", "dec."]
    if not cfg.variational_encoder:
        frozen.append("enc_var.")
    return [n for n in params.names() if not n.startswith(tuple(frozen))]


def warmup_trainable(params: CatParameters, cfg: TrainConfig) -> list[str]:
    prefixes = ["e1.", "e2.", "dec."]
    if cfg.variational_encoder:
        prefixes.append("enc_var.")
    return [n for n in params.names() if n.startswith(tuple(prefixes))]


def _kl_term(mean: Tensor, logvar: Tensor) -> Tensor:
    # per-element mean keeps the penalty scale independent of latent width
    return (-0.5 * (1.0 + logvar - mean * mean - logvar.exp())).mean()


def assemble_training_batch(
    z_st: Tensor,
    z_sc: Tensor,
    plan: ARStepPlan,
    token_ts: np.ndarray,
    eps: np.ndarray,
    schedule: DiffusionSchedule,
) -> TokenBatch:
    """Build the [condition | clean | noisy] token sequence for one batch.

    Noisy tokens get the forward-diffused latent plus the gene's own condition
    latent, which ties each noisy slot to the gene it must denoise. Clean
    tokens are the un-noised latents of every AR step but the last.
    """
    S = plan.S
    v = S - plan.sz[-1]
    sqrt_ab, sqrt_om = noising_coefficients(schedule, token_ts)
    noised = z_st * sqrt_ab[:, None] + Tensor(eps * sqrt_om[:, None])
    tokens = concat([z_sc, z_st.rows(0, v), noised + z_sc], axis=0)
    kinds = np.concatenate([np.zeros(S), np.ones(v), np.full(S, 2)]).astype(np.int8)
    return TokenBatch(
        tokens=tokens,
        kinds=kinds,
        plan=plan,
        timesteps=token_ts,
        noisy=noised,
        alpha_bars=schedule.alpha_bars[token_ts - 1],
    )


def training_loss(
    st_values: np.ndarray,
    sc_values: np.ndarray,
    plan: ARStepPlan,
    token_ts: np.ndarray,
    eps: np.ndarray,
    params: CatParameters,
    cfg: TrainConfig,
    schedule: DiffusionSchedule,
    enc_rng: np.random.Generator | None,
) -> Tensor:
    """Blended objective for one already-permuted gene batch."""
    assert (token_ts >= 1).all(), "clean tokens are the only un-noised gene tokens"
    st_enc = encode(st_values, "st", params, variational=cfg.variational_encoder, rng=enc_rng)
    sc_enc = encode(sc_values, "sc", params)
    inv_scale = 1.0 / float(params["latent.scale"].data)
    batch = assemble_training_batch(
        st_enc.z * inv_scale, sc_enc.z * inv_scale, plan, token_ts, eps, schedule
    )
    mask = build_mask(plan.S, plan.S, plan)
    pred = cat_forward(batch, mask, params)
    loss = ((pred - Tensor(eps)) ** 2.0).mean()
    if cfg.train_decoder:
        recon = decode(st_enc.z, params)
        loss = loss + cfg.lambda_rec * ((recon - Tensor(st_values)) ** 2.0).mean()
    if cfg.variational_encoder:
        loss = loss + cfg.lambda_kl * _kl_term(st_enc.mean, st_enc.logvar)
    return loss


def _assign_token_timesteps(
    plan: ARStepPlan, per_step: tuple[np.ndarray, ...], schedule, rng
) -> np.ndarray:
    token_ts = np.empty(plan.S, dtype=np.int64)
    for i, size in enumerate(plan.sz):
        pool = per_step[i]
        if pool.size == 0:  # adaptive sampling may starve late AR steps
            pool = rng.integers(1, schedule.T + 1, size=1)
        token_ts[plan.cs[i] : plan.cs[i + 1]] = pool[np.arange(size) % pool.size]
    return token_ts


def train_step(
    st_batch: np.ndarray,
    sc_batch: np.ndarray,
    params: CatParameters,
    cfg: TrainConfig,
    rng: np.random.Generator,
    schedule: DiffusionSchedule,
    opt: Adam,
    trainable: list[str] | None = None,
) -> tuple[CatParameters, float]:
    """One optimizer update on a gene batch; returns (params, loss value).

    Draw order per step is fixed (permutation, encoder noise, AR plan,
    timesteps, diffusion noise) so a given seed replays bit-identically.
    """
    st_batch = np.asarray(st_batch, dtype=np.float64)
    sc_batch = np.asarray(sc_batch, dtype=np.float64)
    if st_batch.shape[0] != sc_batch.shape[0]:
        raise ShapeMismatchError("ST and SC batches must cover the same genes")
    S = st_batch.shape[0]
    if cfg.gene_order == "random":
        perm = rng.permutation(S)
        st_batch, sc_batch = st_batch[perm], sc_batch[perm]
    enc_rng = rng if cfg.variational_encoder else None
    plan = generate_ar_steps(S, cfg.ar_decay, rng)
    strategy = parse_strategy(cfg.sampling)
    ts_plan = sample_timesteps(schedule, strategy, plan.N, rng, draws_per_step=max(plan.sz))
    token_ts = _assign_token_timesteps(plan, ts_plan.per_ar_step_timesteps, schedule, rng)
    eps = rng.standard_normal((S, params.cfg.d))

    loss = training_loss(st_batch, sc_batch, plan, token_ts, eps, params, cfg, schedule, enc_rng)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericFailureError(
            f"non-finite training loss (plan {plan.to_text()}, "
            f"max |input| = {np.abs(st_batch).max():.3e})"
        )
    names = diffusion_trainable(params, cfg) if trainable is None else trainable
    grads = gradients(loss, {n: params[n] for n in names})
    opt.step(params, clip_global_norm(grads, cfg.grad_clip))
    return params, value


def _warmup_step(
    st_batch: np.ndarray,
    sc_batch: np.ndarray,
    params: CatParameters,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: Adam,
    trainable: list[str],
) -> float:
    """Autoencoder warmup: reconstruction, cross-modal alignment, and the
    single-cell-to-spatial regression path the conditions must support.

    Reconstruction runs through latents perturbed with Gaussian noise so the
    decoder learns to contract off-manifold directions; generated latents
    land near the manifold, never exactly on it.
    """
    enc_rng = rng if cfg.variational_encoder else None
    st_enc = encode(st_batch, "st", params, variational=cfg.variational_encoder, rng=enc_rng)
    sc_enc = encode(sc_batch, "sc", params)
    target = Tensor(st_batch)
    sigma = cfg.warmup_latent_noise * float(st_enc.z.data.std())
    jitter = Tensor(sigma * rng.standard_normal(st_enc.z.shape))
    loss = ((decode(st_enc.z, params) - target) ** 2.0).mean()
    loss = loss + ((decode(st_enc.z + jitter, params) - target) ** 2.0).mean()
    loss = loss + ((sc_enc.z - st_enc.mean.detach()) ** 2.0).mean()
    loss = loss + ((decode(sc_enc.z + jitter, params) - target) ** 2.0).mean()
    if cfg.variational_encoder:
        loss = loss + cfg.lambda_kl * _kl_term(st_enc.mean, st_enc.logvar)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericFailureError("non-finite warmup loss")
    grads = gradients(loss, {n: params[n] for n in trainable})
    opt.step(params, clip_global_norm(grads, cfg.grad_clip))
    return value


@dataclass
class FitResult:
    params: CatParameters
    history: list[dict] = field(default_factory=list)
    best_val_pcc: float = float("nan")
    best_epoch: int = -1


def _granger_gene_order(values: np.ndarray, genes: list[int]) -> list[int]:
    """Order genes by descending outgoing causal strength (max pairwise F)."""
    strength = dict.fromkeys(genes, 0.0)
    for gi in genes:
        for gj in genes:
            if gi == gj:
                continue
            try:
                result = test_pair(values[gi], values[gj], lag=1)
            except DegenerateInputError:
                continue
            strength[gi] = max(strength[gi], result.f_stat)
    return sorted(genes, key=lambda g: (-strength[g], g))


def _batches(order: list[int], size: int) -> list[list[int]]:
    return [order[i : i + size] for i in range(0, len(order), size)]


def fit(
    st: ExpressionMatrix,
    sc: ExpressionMatrix,
    split: SplitAssignment,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
) -> FitResult:
    """Warmup + diffusion training with per-epoch validation.

    Validation regenerates the held-out validation genes from the single-cell
    reference and scores mean per-gene correlation; the best-scoring
    parameters are retained.
    """
    if st.gene_ids != sc.gene_ids:
        raise ShapeMismatchError("fit expects matrices aligned on the same gene list")
    rng = np.random.default_rng(cfg.seed)
    schedule = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    params = init_params(model_cfg, rng)
    result = FitResult(params=params)
    if cfg.epochs == 0:
        return result

    train_genes = list(split.train_genes)
    val_genes = list(split.val_genes)
    if cfg.gene_order == "granger":
        train_genes = _granger_gene_order(st.values, train_genes)

    warmup_opt = Adam(cfg.recon_lr)
    warm_names = warmup_trainable(params, cfg)
    for epoch in range(cfg.recon_epochs):
        order = train_genes if cfg.gene_order == "granger" else [
            train_genes[i] for i in rng.permutation(len(train_genes))
        ]
        losses = [
            _warmup_step(st.values[b], sc.values[b], params, cfg, rng, warmup_opt, warm_names)
            for b in _batches(order, cfg.batch_genes)
        ]
        if epoch % 50 == 0:
            log.info("warmup epoch %d: recon loss %.5f", epoch, float(np.mean(losses)))

    # pin the diffusion substrate to unit spread (the noise head's analytic
    # skip assumes data at the same scale as the injected Gaussian noise)
    train_latents = encode(st.values[train_genes], "st", params).mean.data
    params["latent.scale"].data[()] = max(float(train_latents.std()), 1e-6)
    log.info("latent scale set to %.4f", float(params["latent.scale"].data))

    opt = Adam(cfg.lr)
    trainable = diffusion_trainable(params, cfg)
    best = FitResult(params=params)
    for epoch in range(cfg.epochs):
        order = train_genes if cfg.gene_order == "granger" else [
            train_genes[i] for i in rng.permutation(len(train_genes))
        ]
        losses = []
        for batch in _batches(order, cfg.batch_genes):
            _, value = train_step(
                st.values[batch], sc.values[batch], params, cfg, rng, schedule, opt, trainable
            )
            losses.append(value)
        row: dict = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_pcc": float("nan")}
        if val_genes and (epoch + 1) % cfg.val_every == 0:
            row["val_pcc"] = _validation_pcc(st, sc, val_genes, params, schedule, cfg, epoch)
            if math.isnan(best.best_val_pcc) or row["val_pcc"] > best.best_val_pcc:
                best = FitResult(
                    params=params.copy(), best_val_pcc=row["val_pcc"], best_epoch=epoch
                )
        result.history.append(row)
        if epoch % 20 == 0:
            log.info(
                "epoch %d: loss %.5f val_pcc %s", epoch, row["train_loss"], row["val_pcc"]
            )

    if best.best_epoch >= 0:
        result.params = best.params
        result.best_val_pcc = best.best_val_pcc
        result.best_epoch = best.best_epoch
    else:
        result.params = params
    return result


def _validation_pcc(
    st: ExpressionMatrix,
    sc: ExpressionMatrix,
    val_genes: list[int],
    params: CatParameters,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    epoch: int,
) -> float:
    gene_ids = [st.gene_ids[i] for i in val_genes]
    predicted = generate_genes(
        sc,
        gene_ids,
        params,
        schedule,
        groups=cfg.val_ar_groups,
        strategy=parse_strategy(cfg.val_sampling),
        seed=cfg.seed + epoch + 1,
    )
    scores = []
    for row, gene in enumerate(val_genes):
        try:
            scores.append(pcc(predicted.values[row], st.values[gene]))
        except DegenerateInputError:  # constant early-training output scores zero
            scores.append(0.0)
    return float(np.mean(scores))
