"""Model assembly: L unrolled layers, forward passes with optional
per-layer probes, parameter counting/initialization, and checkpoints.

A layer maps Z to ista_step(LN2(attention_update(LN1(Z)))) — layer norm
before each of the two operators, with the attention update carrying its
own residual branch.  Probes evaluate the sparse-rate-reduction measure of
each layer's raw (post-ISTA) output against that layer's own basis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as ly
from . import rates
from .autodiff import Tensor, as_tensor, concat
from .errors import ConfigError, FormatError, ShapeError
from .linalg import rng_for

__all__ = [
    "ModelConfig",
    "ProbeRecord",
    "Model",
    "init_model",
    "forward",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    L: int = 12
    d: int = 384
    K: int = 6
    alpha: float = 1.0
    beta: float = 0.5
    eps_sq: float | None = None  # None: eps^2 = p/N so the attention scale gamma is exactly 1
    lambda_sparsity: float = 0.1
    variant: str = ly.CRATE_C
    dropout: float = 0.0
    num_classes: int = 10
    seed: int = 0
    # input geometry: images (patchified) or pre-tokenized feature sequences
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    feat_dim: int | None = None
    num_tokens: int | None = None

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("depth L must be at least 1")
        if self.d <= 0 or self.K <= 0 or self.d % self.K != 0:
            raise ConfigError(f"width d = {self.d} must be a positive multiple of K = {self.K}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.variant not in ly.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.eps_sq is not None and self.eps_sq <= 0:
            raise ConfigError("eps_sq must be positive when given")
        if (self.feat_dim is None) != (self.num_tokens is None):
            raise ConfigError("feat_dim and num_tokens must be given together")
        if self.feat_dim is None and self.image_size % self.patch != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")

    @property
    def p(self) -> int:
        return self.d // self.K

    @property
    def in_dim(self) -> int:
        return self.feat_dim if self.feat_dim is not None else self.patch * self.patch * self.channels

    @property
    def grid_tokens(self) -> int:
        if self.num_tokens is not None:
            return self.num_tokens
        side = self.image_size // self.patch
        return side * side

    @property
    def tokens(self) -> int:
        """Token count including the prepended CLS column."""
        return self.grid_tokens + 1

    def attention_gamma(self, n_tokens: int) -> float:
        if self.eps_sq is None:
            return 1.0
        return self.p / (n_tokens * self.eps_sq)


@dataclass
class ProbeRecord:
    """Per-layer statistics: ambient rate r, subspace rate rc, sparsity l0
    and the combined measure srr = lambda*l0 + rc - r."""

    layer: int
    r: float
    rc: float
    l0: float
    srr: float


def _has_w(variant: str) -> bool:
    return variant in (ly.CRATE, ly.CRATE_FIX)


class Model:
    """Parameter container plus the forward pass.

    ``params`` holds trainable tensors, ``frozen`` the non-trainable ones
    (the fixed W variant), ``init_snapshot`` a plain-array copy of every
    parameter at initialization time (distance-to-init measures need it).
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], frozen: dict[str, Tensor], init_snapshot: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.frozen = frozen
        self.init_snapshot = init_snapshot

    # ------------------------------------------------------------------
    def trainable_params(self) -> dict[str, Tensor]:
        return self.params

    def all_params(self) -> dict[str, Tensor]:
        merged = dict(self.params)
        merged.update(self.frozen)
        return merged

    def tracked_matrices(self) -> list[tuple[str, np.ndarray]]:
        """Weight matrices entering the spectral/Frobenius measure families:
        embedding, each layer's U and D (and W when present), and the head."""
        out = [("embed", self.params["embed"].data)]
        for i in range(self.cfg.L):
            out.append((f"layers.{i}.U", self.params[f"layers.{i}.U"].data))
            out.append((f"layers.{i}.D", self.params[f"layers.{i}.D"].data))
            if _has_w(self.cfg.variant):
                name = f"layers.{i}.W"
                src = self.params if name in self.params else self.frozen
                out.append((name, src[name].data))
        out.append(("head.weight", self.params["head.weight"].data))
        return out

    # ------------------------------------------------------------------
    def embed_inputs(self, raw: np.ndarray, traced: bool = False, train_mode: bool = False, rng=None):
        """Feature columns (B, F, T) or (F, T) -> token matrix with CLS and
        positional encoding.  Traced mode builds the autodiff graph; training
        mode additionally applies embedding dropout."""
        raw = np.asarray(raw, dtype=np.float64)
        single = raw.ndim == 2
        if single:
            raw = raw[None]
        if raw.shape[1] != self.cfg.in_dim:
            raise ShapeError(f"expected {self.cfg.in_dim}-dim feature columns, got {raw.shape[1]}")
        P = self.all_params()
        embed = P["embed"] if traced else P["embed"].data
        cls = P["cls"] if traced else P["cls"].data
        pos = P["pos"] if traced else P["pos"].data
        B, _, T = raw.shape
        if traced:
            tok = embed @ Tensor(raw)
            head_col = cls.reshape(self.cfg.d, 1).broadcast_to((B, self.cfg.d, 1))
            tok = concat([head_col, tok], axis=-1)
            tok = tok + pos
        else:
            tok = embed @ raw
            head_col = np.broadcast_to(cls.reshape(self.cfg.d, 1), (B, self.cfg.d, 1))
            tok = np.concatenate([head_col, tok], axis=-1)
            tok = tok + pos
        if train_mode and self.cfg.dropout > 0.0:
            if rng is None:
                raise ConfigError("training-mode dropout needs an rng")
            mask = _dropout_mask(rng, (B, self.cfg.d, T + 1), self.cfg.dropout)
            tok = tok * mask
        if single:
            tok = tok[0]
        return tok

    def apply_layer(self, i: int, Z, attn_masks=None, out_mask=None, ln_identity: bool = False):
        """Run layer ``i`` (0-based) on ``Z`` with the given dropout masks.
        Used by the regularizer to replay a layer from a detached input."""
        traced = isinstance(Z, Tensor)
        gamma = self.cfg.attention_gamma(Z.shape[-1])
        lp = self.layer_params(i, traced=traced)
        return _apply_layer(
            Z, lp, self.cfg.variant, gamma, self.cfg.lambda_sparsity, ln_identity, attn_masks, out_mask
        )

    def layer_params(self, i: int, traced: bool = True) -> ly.LayerParams:
        P = self.all_params()

        def get(name):
            t = P[f"layers.{i}.{name}"]
            return t if traced else t.data

        W = None
        if _has_w(self.cfg.variant):
            W = get("W")
        return ly.LayerParams(
            U=get("U"),
            D=get("D"),
            ln1_gain=get("ln1_gain"),
            ln1_bias=get("ln1_bias"),
            ln2_gain=get("ln2_gain"),
            ln2_bias=get("ln2_bias"),
            alpha=self.cfg.alpha,
            beta=self.cfg.beta,
            num_heads=self.cfg.K,
            W=W,
        )

    # ------------------------------------------------------------------
    def run(
        self,
        tokens,
        train_mode: bool = False,
        probe: bool = False,
        rng=None,
        probe_rate: rates.RateConfig | None = None,
        ln_identity: bool = False,
        keep_cache: bool = False,
    ):
        """Forward pass.

        ``tokens``: (d, N), (B, d, N) ndarray, or a traced Tensor.
        Returns (logits, probes, cache); ``probes`` is empty unless
        requested, ``cache`` is None unless ``keep_cache``.
        """
        cfg = self.cfg
        traced = isinstance(tokens, Tensor)
        if not traced:
            tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.shape[-2] != cfg.d:
            raise ShapeError(f"token dimension {tokens.shape[-2]} does not match width {cfg.d}")
        n_tok = tokens.shape[-1]
        gamma = cfg.attention_gamma(n_tok)
        use_dropout = train_mode and cfg.dropout > 0.0 and traced
        if train_mode and cfg.dropout > 0.0 and rng is None:
            raise ConfigError("training-mode dropout needs an rng")

        probe_cfg = None
        if probe:
            probe_cfg = probe_rate or rates.RateConfig(d=cfg.d, N=n_tok, K=cfg.K)

        Z = tokens
        probes: list[ProbeRecord] = []
        cache: list[dict] | None = [] if keep_cache else None
        for i in range(cfg.L):
            lp = self.layer_params(i, traced=traced)
            attn_masks = out_mask = None
            if use_dropout:
                batch_shape = Z.shape[:-2]
                attn_masks = [
                    _dropout_mask(rng, batch_shape + (n_tok, n_tok), cfg.dropout) for _ in range(cfg.K)
                ]
                out_mask = _dropout_mask(rng, batch_shape + (cfg.d, n_tok), cfg.dropout)
            layer_in = Z
            Z = _apply_layer(Z, lp, cfg.variant, gamma, cfg.lambda_sparsity, ln_identity, attn_masks, out_mask)
            if cache is not None:
                cache.append(
                    {"input": layer_in, "attn_masks": attn_masks, "out_mask": out_mask, "output": Z}
                )
            if probe:
                zval = Z.data if traced else Z
                probes.append(_probe_layer(i + 1, zval, _as_array(lp.U), probe_cfg))

        P = self.all_params()
        hw = P["head.weight"] if traced else P["head.weight"].data
        hb = P["head.bias"] if traced else P["head.bias"].data
        cls_col = Z[..., :, 0:1]
        raw_logit = hw @ cls_col
        if traced:
            logits = raw_logit.reshape(raw_logit.shape[:-1]) + hb
        else:
            logits = raw_logit[..., 0] + hb
        return logits, probes, cache


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _dropout_mask(rng, shape, p: float) -> np.ndarray:
    keep = 1.0 - p
    return (rng.random(shape) < keep).astype(np.float64) / keep


def _apply_layer(Z, lp: ly.LayerParams, variant, gamma, lambda_sparsity, ln_identity, attn_masks, out_mask):
    Zn = Z if ln_identity else ly.layer_norm(Z, lp.ln1_gain, lp.ln1_bias)
    Za = ly.attention_update(Zn, lp, variant, gamma, attn_masks=attn_masks, out_mask=out_mask)
    Ya = Za if ln_identity else ly.layer_norm(Za, lp.ln2_gain, lp.ln2_bias)
    return ly.ista_step(Ya, lp.D, lp.beta, lambda_sparsity)


def _probe_layer(layer_no: int, Z: np.ndarray, U: np.ndarray, pc: rates.RateConfig) -> ProbeRecord:
    if Z.ndim == 2:
        r = rates.coding_rate(Z, pc.full_scale)
        rc = rates.projected_coding_rate(Z, U, pc.K, pc.gamma)
        l0: float | int = rates.sparsity_l0(Z)
    else:
        rs, rcs, l0s = [], [], []
        for b in range(Z.shape[0]):
            rs.append(rates.coding_rate(Z[b], pc.full_scale))
            rcs.append(rates.projected_coding_rate(Z[b], U, pc.K, pc.gamma))
            l0s.append(rates.sparsity_l0(Z[b]))
        r, rc, l0 = float(np.mean(rs)), float(np.mean(rcs)), float(np.mean(l0s))
    srr = pc.lambda_sparsity * l0 + rc - r
    return ProbeRecord(layer=layer_no, r=float(r), rc=float(rc), l0=l0, srr=float(srr))


def forward(model: Model, tokens, train_mode: bool = False, probe: bool = False, rng=None, probe_rate=None):
    """Spec-level forward: (logits, probes)."""
    logits, probes, _ = model.run(tokens, train_mode=train_mode, probe=probe, rng=rng, probe_rate=probe_rate)
    return logits, probes


def param_count(cfg: ModelConfig) -> int:
    """Exact trainable-parameter count from the configuration alone."""
    d, L = cfg.d, cfg.L
    total = d * cfg.in_dim  # patch/feature embedding (no bias)
    total += d * cfg.tokens  # positional table
    total += d  # CLS token
    per_layer = d * d + d * d + 4 * d  # U, D, two layer norms
    if cfg.variant == ly.CRATE:  # learnable W; the frozen variant does not count
        per_layer += d * d
    total += L * per_layer
    total += cfg.num_classes * d + cfg.num_classes  # linear head
    return total


def init_model(cfg: ModelConfig) -> Model:
    """Allocate and seed all parameters; returns the model with a retained
    copy of the initial values.  Same seed, same bytes."""
    d = cfg.d
    rng = rng_for(cfg.seed, "init")
    scale_d = 1.0 / np.sqrt(d)
    arrays: dict[str, np.ndarray] = {
        "embed": rng.normal(0.0, 1.0 / np.sqrt(cfg.in_dim), (d, cfg.in_dim)),
        "pos": rng.normal(0.0, 0.02, (d, cfg.tokens)),
        "cls": rng.normal(0.0, 0.02, (d,)),
    }
    for i in range(cfg.L):
        arrays[f"layers.{i}.U"] = rng.normal(0.0, scale_d, (d, d))
        arrays[f"layers.{i}.D"] = rng.normal(0.0, scale_d, (d, d))
        if _has_w(cfg.variant):
            arrays[f"layers.{i}.W"] = rng.normal(0.0, scale_d, (d, d))
        arrays[f"layers.{i}.ln1_gain"] = np.ones(d)
        arrays[f"layers.{i}.ln1_bias"] = np.zeros(d)
        arrays[f"layers.{i}.ln2_gain"] = np.ones(d)
        arrays[f"layers.{i}.ln2_bias"] = np.zeros(d)
    arrays["head.weight"] = rng.normal(0.0, scale_d, (cfg.num_classes, d))
    arrays["head.bias"] = np.zeros(cfg.num_classes)

    params: dict[str, Tensor] = {}
    frozen: dict[str, Tensor] = {}
    for name, arr in arrays.items():
        if cfg.variant == ly.CRATE_FIX and name.endswith(".W"):
            frozen[name] = Tensor(arr)
        else:
            params[name] = Tensor(arr, requires_grad=True)
    snapshot = {name: arr.copy() for name, arr in arrays.items()}
    return Model(cfg, params, frozen, snapshot)


# ----------------------------------------------------------------------
# checkpoints: a single .npz holding version, config JSON, parameters,
# frozen parameters, and the initial snapshot.

def save_checkpoint(model: Model, path: str) -> None:
    payload: dict[str, np.ndarray] = {
        "meta.version": np.array(CHECKPOINT_VERSION),
        "meta.config": np.array(json.dumps(asdict(model.cfg))),
    }
    for name, t in model.params.items():
        payload[f"param.{name}"] = t.data
    for name, t in model.frozen.items():
        payload[f"frozen.{name}"] = t.data
    for name, arr in model.init_snapshot.items():
        payload[f"init.{name}"] = arr
    np.savez(path, **payload)


def load_checkpoint(path: str) -> Model:
    with np.load(path, allow_pickle=False) as zf:
        if "meta.version" not in zf or int(zf["meta.version"]) != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version in {path}")
        cfg = ModelConfig(**json.loads(str(zf["meta.config"])))
        params: dict[str, Tensor] = {}
        frozen: dict[str, Tensor] = {}
        snapshot: dict[str, np.ndarray] = {}
        for key in zf.files:
            if key.startswith("param."):
                params[key[len("param."):]] = Tensor(zf[key], requires_grad=True)
            elif key.startswith("frozen."):
                frozen[key[len("frozen."):]] = Tensor(zf[key])
            elif key.startswith("init."):
                snapshot[key[len("init."):]] = zf[key]
    return Model(cfg, params, frozen, snapshot)
