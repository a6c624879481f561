"""Flat ``key = value`` configuration with sections, typed by a key registry.

Files are INI-style::

    [train]
    epochs = 120
    lr = 0.002

which flattens to ``train.epochs`` etc. Unknown keys and untypable values are
rejected. CLI ``--set section.key=value`` overrides go through the same
registry.
"""

from __future__ import annotations

import configparser

from .errors import ConfigError
from .model import ModelConfig
from .synth import ChainEdge, SynthConfig, chain_config
from .train import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


REGISTRY: dict[str, type] = {
    "model.d": int,
    "model.heads": int,
    "model.blocks": int,
    "diffusion.T": int,
    "diffusion.beta_start": float,
    "diffusion.beta_end": float,
    "diffusion.sampling": str,
    "ar.decay": float,
    "train.epochs": int,
    "train.batch_genes": int,
    "train.lr": float,
    "train.recon_epochs": int,
    "train.recon_lr": float,
    "train.warmup_latent_noise": float,
    "train.train_decoder": bool,
    "train.variational_encoder": bool,
    "train.val_every": int,
    "train.val_sampling": str,
    "train.val_ar_groups": int,
    "train.gene_order": str,
    "train.lambda_rec": float,
    "train.lambda_kl": float,
    "train.grad_clip": float,
    "data.qc_min_genes_sc": int,
    "data.qc_min_genes_st": int,
    "data.normalize": bool,
    "data.hvg_fraction": float,
    "synth.n_genes": int,
    "synth.n_spots": int,
    "synth.n_cells": int,
    "synth.noise_sd": float,
    "synth.n_factors": int,
    "synth.dropout_rate": float,
    "synth.chain_edges": str,
    "synth.chain_length": int,
    "synth.coeff": float,
    "synth.lag": int,
    "generate.ar_groups": int,
}


def _convert(key: str, raw: str):
    kind = REGISTRY.get(key)
    if kind is None:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        return _parse_bool(raw) if kind is bool else kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config(path=None) -> dict[str, object]:
    """Read a config file into a flat typed dict; missing path gives defaults only."""
    values: dict[str, object] = {}
    if path is None:
        return values
    parser = configparser.ConfigParser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[f"{section}.{key}"] = _convert(f"{section}.{key}", raw)
    return values


def apply_overrides(values: dict[str, object], overrides) -> dict[str, object]:
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        values[key.strip()] = _convert(key.strip(), raw.strip())
    return values


def train_config(values: dict[str, object], seed: int) -> TrainConfig:
    cfg = TrainConfig(seed=seed)
    mapping = {
        "train.epochs": "epochs",
        "train.batch_genes": "batch_genes",
        "train.lr": "lr",
        "ar.decay": "ar_decay",
        "train.train_decoder": "train_decoder",
        "train.variational_encoder": "variational_encoder",
        "diffusion.sampling": "sampling",
        "diffusion.T": "T",
        "diffusion.beta_start": "beta_start",
        "diffusion.beta_end": "beta_end",
        "train.recon_epochs": "recon_epochs",
        "train.recon_lr": "recon_lr",
        "train.warmup_latent_noise": "warmup_latent_noise",
        "train.val_every": "val_every",
        "train.val_sampling": "val_sampling",
        "train.val_ar_groups": "val_ar_groups",
        "train.gene_order": "gene_order",
        "train.lambda_rec": "lambda_rec",
        "train.lambda_kl": "lambda_kl",
        "train.grad_clip": "grad_clip",
    }
    for key, attr in mapping.items():
        if key in values:
            setattr(cfg, attr, values[key])
    cfg.__post_init__()
    return cfg


def model_config(values: dict[str, object], p: int, q: int, variational: bool) -> ModelConfig:
    return ModelConfig(
        p=p,
        q=q,
        d=int(values.get("model.d", 64)),
        heads=int(values.get("model.heads", 4)),
        blocks=int(values.get("model.blocks", 3)),
        variational=variational,
    )


def synth_config(values: dict[str, object], seed: int) -> SynthConfig:
    edges_text = str(values.get("synth.chain_edges", "")).strip()
    base = chain_config(
        n_genes=int(values.get("synth.n_genes", 32)),
        n_spots=int(values.get("synth.n_spots", 16)),
        n_cells=int(values.get("synth.n_cells", 64)),
        chain_length=int(values.get("synth.chain_length", 6)),
        coeff=float(values.get("synth.coeff", 0.9)),
        lag=int(values.get("synth.lag", 1)),
        noise_sd=float(values.get("synth.noise_sd", 0.1)),
        dropout_rate=float(values.get("synth.dropout_rate", 0.0)),
        n_factors=int(values.get("synth.n_factors", 4)),
        seed=seed,
    )
    if edges_text:
        edges = [ChainEdge.from_text(tok) for tok in edges_text.split(",") if tok.strip()]
        return SynthConfig(
            n_genes=base.n_genes,
            n_spots=base.n_spots,
            n_cells=base.n_cells,
            chain_edges=edges,
            noise_sd=base.noise_sd,
            dropout_rate=base.dropout_rate,
            n_factors=base.n_factors,
            seed=seed,
        )
    return base


def data_options(values: dict[str, object]) -> dict[str, object]:
    return {
        "min_genes_sc": int(values.get("data.qc_min_genes_sc", 500)),
        "min_genes_st": int(values.get("data.qc_min_genes_st", 1)),
        "apply_normalize": bool(values.get("data.normalize", True)),
        "top_fraction": float(values.get("data.hvg_fraction", 0.25)),
    }
