"""Masked concept-token autoencoder with a layer-paired concept-map decoder.

Encoder layers run two parallel paths from the layer input: self-attention
plus FFN over the visible patch tokens, and cross-attention plus FFN that
updates a small set of learnable concept tokens against those visible
tokens (no concept-to-concept attention). After every second encoder layer
the current concept tokens are snapshotted; decoder layer d cross-attends
its full token sequence (visible latents plus a shared learned mask token,
rearranged into patch order) to the d-th snapshot from the end, with no
token-to-token attention. A linear head maps decoder outputs back to pixel
patches.

Ablation variants rewire the same parameter set:

* ``no_branches``: snapshots are ignored; the final concepts are appended
  to the token sequence once and each decoder layer runs plain
  self-attention over the combined sequence.
* ``fixed_concepts``: the evolving concept tokens are replaced by supplied
  prototype embeddings that query each paired encoder layer's visible
  tokens; the initial concept tokens receive no gradient.
* ``repetitive_concepts``: every decoder layer consumes the final concept
  tokens instead of its paired snapshot.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .layers import (FeedForward, LayerNorm, Linear, MultiHeadAttention,
                     ParamRegistry, init_params)

VARIANTS = ("full", "no_branches", "fixed_concepts", "repetitive_concepts")
MASK_SHAPES = ("random", "square")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 24
    width: int = 24
    channels: int = 3
    patch_size: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    enc_mlp_dim: int = 128
    dec_mlp_dim: int = 128
    num_concepts: int = 4
    variant: str = "full"
    attn_scale: str = "per_head"
    pos_embed: bool = True
    bank_dim: int | None = None  # None: prototypes already live in embed_dim
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}")
        if self.enc_layers < 2 or self.enc_layers % 2:
            raise ConfigError(f"enc_layers must be even and >= 2, got {self.enc_layers}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.attn_scale not in ("per_head", "full_dim"):
            raise ConfigError(f"unknown attn_scale {self.attn_scale!r}")
        if self.num_concepts < 1:
            raise ConfigError("num_concepts must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def dec_layers(self) -> int:
        return self.enc_layers // 2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def preset_config(name: str, **overrides) -> ModelConfig:
    """Named architecture presets: ``tiny`` (desk scale) and ``paper-small``."""
    if name == "tiny":
        base = {}
    elif name == "paper-small":
        base = dict(height=48, width=48, patch_size=6, embed_dim=512,
                    num_heads=4, enc_layers=2, enc_mlp_dim=128, dec_mlp_dim=128)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    """Seeded visible/masked split of the patch indices."""

    seed: int
    num_patches: int
    ratio: float
    shape: str
    perm: np.ndarray      # visible indices followed by masked indices
    visible: np.ndarray
    masked: np.ndarray

    @property
    def keep(self) -> int:
        return int(self.visible.size)

    @property
    def num_masked(self) -> int:
        return int(self.masked.size)


def make_mask_plan(num_patches: int, ratio: float, seed: int,
                   shape: str = "random") -> MaskPlan:
    """Split patch indices into visible and masked sets.

    ``random`` draws a seeded uniform permutation and masks the tail.
    ``square`` masks the largest centered square block (in patch grid
    coordinates) that fits in the mask budget, topping up randomly.

    The visible and masked index lists are canonicalized to ascending
    order (the split itself stays seeded) so that the token processing
    order, and with it every float reduction, is independent of the seed
    whenever the split is; ``perm`` keeps the raw draw.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    if shape not in MASK_SHAPES:
        raise ConfigError(f"unknown mask shape {shape!r}, expected one of {MASK_SHAPES}")
    num_masked = int(math.floor(ratio * num_patches))
    rng = np.random.default_rng(seed)
    if shape == "random":
        perm = rng.permutation(num_patches)
        visible = np.sort(perm[: num_patches - num_masked])
        masked = np.sort(perm[num_patches - num_masked:])
    else:
        grid = math.isqrt(num_patches)
        if grid * grid != num_patches:
            raise ConfigError(
                f"square masks need a square patch grid, got {num_patches} patches")
        side = min(math.isqrt(num_masked), grid)
        r0 = (grid - side) // 2
        block = [(r0 + r) * grid + (r0 + c) for r in range(side) for c in range(side)]
        block = np.asarray(block, dtype=np.intp)
        rest = np.setdiff1d(np.arange(num_patches), block)
        extra = rng.permutation(rest)[: num_masked - side * side]
        masked = np.sort(np.concatenate([block, extra]).astype(np.intp))
        visible = np.setdiff1d(np.arange(num_patches), masked).astype(np.intp)
        perm = np.concatenate([visible, masked])
    return MaskPlan(seed=seed, num_patches=num_patches, ratio=ratio, shape=shape,
                    perm=perm.astype(np.intp), visible=visible.astype(np.intp),
                    masked=masked.astype(np.intp))


# ---------------------------------------------------------------------------
# patch <-> image


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[H, W, C] (or [B, H, W, C]) -> [N, P*P*C] (or [B, N, P*P*C]).

    Patches in reading order; inside a patch, row-major pixels then channels.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        image = image[None]
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = (image.reshape(b, gh, p, gw, p, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(b, gh * gw, p * p * c))
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, height: int, width: int, channels: int,
               patch_size: int) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    batched = patches.ndim == 3
    if not batched:
        patches = patches[None]
    p = patch_size
    gh, gw = height // p, width // p
    if patches.shape[-2] != gh * gw or patches.shape[-1] != p * p * channels:
        raise DimensionError(
            f"patches {patches.shape[-2:]} inconsistent with "
            f"{height}x{width}x{channels} at patch size {p}")
    b = patches.shape[0]
    out = (patches.reshape(b, gh, gw, p, p, channels)
                  .transpose(0, 1, 3, 2, 4, 5)
                  .reshape(b, height, width, channels))
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# compute accounting

def encoder_token_count(cfg: ModelConfig, ratio: float) -> int:
    """Per-layer encoder token load: visible patches plus concept tokens."""
    n = cfg.num_patches
    return n - int(math.floor(ratio * n)) + cfg.num_concepts


def encoder_attention_cost(cfg: ModelConfig, ratio: float, batch: int = 1) -> int:
    """Reported attention-map MAC cost of one encoder pass.

    Cost model: scores plus value mixing over the combined per-layer token
    load T, i.e. 2 * embed_dim * T^2 per layer, summed over layers.
    """
    t = encoder_token_count(cfg, ratio)
    return batch * cfg.enc_layers * 2 * cfg.embed_dim * t * t


# ---------------------------------------------------------------------------
# blocks


class EncoderLayer:
    """Parallel token and concept paths, both post-normalized with residuals."""

    def __init__(self, cfg: ModelConfig, registry: ParamRegistry, name: str):
        e, dt = cfg.embed_dim, cfg.np_dtype
        self.token_attn = MultiHeadAttention(e, cfg.num_heads, registry,
                                             f"{name}.token_attn", cfg.attn_scale, dt)
        self.token_ln1 = LayerNorm(e, registry, f"{name}.token_ln1", cfg.ln_eps, dt)
        self.token_ffn = FeedForward(e, cfg.enc_mlp_dim, registry, f"{name}.token_ffn", dt)
        self.token_ln2 = LayerNorm(e, registry, f"{name}.token_ln2", cfg.ln_eps, dt)
        self.concept_attn = MultiHeadAttention(e, cfg.num_heads, registry,
                                               f"{name}.concept_attn", cfg.attn_scale, dt)
        self.concept_ln1 = LayerNorm(e, registry, f"{name}.concept_ln1", cfg.ln_eps, dt)
        self.concept_ffn = FeedForward(e, cfg.enc_mlp_dim, registry, f"{name}.concept_ffn", dt)
        self.concept_ln2 = LayerNorm(e, registry, f"{name}.concept_ln2", cfg.ln_eps, dt)

    def token_path(self, visible: Tensor) -> Tensor:
        if visible.shape[-2] == 0:
            return visible
        h = self.token_ln1(ag.add(visible, self.token_attn(visible, visible, role="enc_self")))
        return self.token_ln2(ag.add(h, self.token_ffn(h)))

    def concept_path(self, concepts: Tensor, visible: Tensor) -> Tensor:
        if visible.shape[-2] == 0:
            # nothing to attend to: the attention term contributes zeros
            h = self.concept_ln1(concepts)
        else:
            h = self.concept_ln1(
                ag.add(concepts, self.concept_attn(concepts, visible, role="enc_cross")))
        return self.concept_ln2(ag.add(h, self.concept_ffn(h)))

    def forward(self, visible: Tensor, concepts: Tensor):
        # both paths read this layer's inputs
        return self.token_path(visible), self.concept_path(concepts, visible)


class DecoderLayer:
    """Cross-attention of the full token sequence onto concept tokens, then FFN."""

    def __init__(self, cfg: ModelConfig, registry: ParamRegistry, name: str):
        e, dt = cfg.embed_dim, cfg.np_dtype
        self.attn = MultiHeadAttention(e, cfg.num_heads, registry,
                                       f"{name}.attn", cfg.attn_scale, dt)
        self.ln1 = LayerNorm(e, registry, f"{name}.ln1", cfg.ln_eps, dt)
        self.ffn = FeedForward(e, cfg.dec_mlp_dim, registry, f"{name}.ffn", dt)
        self.ln2 = LayerNorm(e, registry, f"{name}.ln2", cfg.ln_eps, dt)

    def forward(self, tokens: Tensor, concepts: Tensor) -> Tensor:
        h = self.ln1(ag.add(tokens, self.attn(tokens, concepts, role="dec_cross")))
        return self.ln2(ag.add(h, self.ffn(h)))

    def forward_self(self, tokens: Tensor) -> Tensor:
        h = self.ln1(ag.add(tokens, self.attn(tokens, tokens, role="dec_self")))
        return self.ln2(ag.add(h, self.ffn(h)))


@dataclass
class ForwardOutput:
    recon_patches: Tensor          # [b, N, P*P*C]
    concepts_final: Tensor         # [b, M, E]
    visible_latents: Tensor        # [b, keep, E]
    snapshots: list                # concept tokens after every second encoder layer
    plan: MaskPlan
    decoder_input: Tensor          # [b, N, E], assembled tokens fed to the decoder
    target_patches: np.ndarray     # [b, N, P*P*C] ground-truth pixels
    variant: str = "full"
    prototypes: Tensor | None = None  # only set for the fixed_concepts variant


class ConceptMapModel:
    """Owner of the parameter registry and of all forward wiring."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.registry = ParamRegistry()
        dt = cfg.np_dtype
        e, n, m = cfg.embed_dim, cfg.num_patches, cfg.num_concepts
        self.patch_embed = Linear(cfg.patch_dim, e, self.registry, "patch_embed", dt)
        self.concept_tokens = self.registry.register(
            "concept_tokens", Tensor(np.zeros((m, e), dtype=dt)))
        self.mask_token = self.registry.register(
            "mask_token", Tensor(np.zeros(e, dtype=dt)))
        if cfg.pos_embed:
            self.enc_pos = self.registry.register("enc_pos", Tensor(np.zeros((n, e), dtype=dt)))
            self.dec_pos = self.registry.register("dec_pos", Tensor(np.zeros((n, e), dtype=dt)))
        else:
            self.enc_pos = self.dec_pos = None
        self.enc_blocks = [EncoderLayer(cfg, self.registry, f"enc.{i}")
                           for i in range(cfg.enc_layers)]
        self.dec_blocks = [DecoderLayer(cfg, self.registry, f"dec.{i}")
                           for i in range(cfg.dec_layers)]
        self.pixel_head = Linear(e, cfg.patch_dim, self.registry, "pixel_head", dt)
        if cfg.bank_dim is not None and cfg.bank_dim != e:
            self.bank_proj = Linear(cfg.bank_dim, e, self.registry, "bank_proj", dt)
        else:
            self.bank_proj = None

    def init_params(self, seed: int) -> None:
        init_params(self.registry, seed)

    # -- prototype handling ------------------------------------------------

    def project_prototypes(self, vectors) -> Tensor:
        """Lift bank-space vectors into the model width.

        With a learned bank projection the linear map owns the scale; the
        identity path multiplies by sqrt(embed_dim) so unit-norm bank
        vectors land at the magnitude layer-normalized concept rows carry.
        """
        t = vectors if isinstance(vectors, Tensor) else Tensor(
            np.asarray(vectors, dtype=self.cfg.np_dtype))
        if self.bank_proj is not None:
            return self.bank_proj(t)
        if t.shape[-1] != self.cfg.embed_dim:
            raise ConfigError(
                f"prototype width {t.shape[-1]} != model width {self.cfg.embed_dim} "
                "and no bank projection is configured")
        return ag.mul(t, math.sqrt(self.cfg.embed_dim))

    def project_prototypes_data(self, vectors: np.ndarray) -> np.ndarray:
        """Non-differentiable counterpart used by prediction and swaps."""
        vectors = np.asarray(vectors, dtype=self.cfg.np_dtype)
        if self.bank_proj is not None:
            return vectors @ self.bank_proj.weight.data + self.bank_proj.bias.data
        if vectors.shape[-1] != self.cfg.embed_dim:
            raise ConfigError(
                f"prototype width {vectors.shape[-1]} != model width {self.cfg.embed_dim} "
                "and no bank projection is configured")
        return vectors * math.sqrt(self.cfg.embed_dim)

    # -- encoder -----------------------------------------------------------

    def embed_visible(self, patches: Tensor, plan: MaskPlan) -> Tensor:
        """Project visible patches and add their positional rows."""
        vis = ag.gather_rows(patches, plan.visible)
        x = self.patch_embed(vis)
        if self.enc_pos is not None:
            x = ag.add(x, ag.gather_rows(self.enc_pos, plan.visible))
        return x

    def encode(self, patches: Tensor, plan: MaskPlan, variant: str | None = None,
               prototypes: Tensor | None = None):
        """Run the encoder stack.

        Returns (visible_latents, snapshots, concepts_final); snapshots holds
        the concept tokens captured after layers 2, 4, ..., enc_layers.
        """
        variant = variant or self.cfg.variant
        b = patches.shape[0]
        vis = self.embed_visible(patches, plan)
        snapshots = []
        if variant == "fixed_concepts":
            if prototypes is None:
                raise ContractError("fixed_concepts needs per-sample prototype embeddings")
            proto_q = self.project_prototypes(prototypes)
            for i, blk in enumerate(self.enc_blocks):
                nxt = blk.token_path(vis)
                if (i + 1) % 2 == 0:
                    snapshots.append(blk.concept_path(proto_q, vis))
                vis = nxt
            concepts = snapshots[-1]
        else:
            concepts = ag.expand_leading(self.concept_tokens, b)
            for i, blk in enumerate(self.enc_blocks):
                nxt_vis, concepts = blk.forward(vis, concepts)
                if (i + 1) % 2 == 0:
                    snapshots.append(concepts)
                vis = nxt_vis
        return vis, snapshots, concepts

    # -- decoder -----------------------------------------------------------

    def assemble_decoder_input(self, visible_latents: Tensor, plan: MaskPlan) -> Tensor:
        """Rearrange visible latents into patch order, fill masked slots with
        the shared mask token, and add decoder positions."""
        n = self.cfg.num_patches
        b = visible_latents.shape[0]
        full = None
        if plan.keep > 0:
            full = ag.scatter_rows(visible_latents, plan.visible, n)
        if plan.num_masked > 0:
            mt = ag.expand_leading(ag.expand_leading(self.mask_token, plan.num_masked), b)
            placed = ag.scatter_rows(mt, plan.masked, n)
            full = placed if full is None else ag.add(full, placed)
        if self.dec_pos is not None:
            full = ag.add(full, self.dec_pos)
        return full

    def decode(self, decoder_input: Tensor, snapshots: list) -> Tensor:
        """Decoder layer d (1-indexed) consumes the d-th snapshot from the end."""
        if len(snapshots) != self.cfg.dec_layers:
            raise ContractError(
                f"need {self.cfg.dec_layers} concept snapshots, got {len(snapshots)}")
        x = decoder_input
        for d, blk in enumerate(self.dec_blocks, start=1):
            x = blk.forward(x, snapshots[-d])
        return self.pixel_head(x)

    def decode_no_branches(self, decoder_input: Tensor, concepts_final: Tensor) -> Tensor:
        """Ablation: concepts appended once, plain self-attention per layer."""
        x = ag.concat_rows(decoder_input, concepts_final)
        for blk in self.dec_blocks:
            x = blk.forward_self(x)
        tokens = ag.gather_rows(x, np.arange(self.cfg.num_patches))
        return self.pixel_head(tokens)

    def decode_variant(self, decoder_input: Tensor, snapshots: list,
                       concepts_final: Tensor, variant: str) -> Tensor:
        if variant == "no_branches":
            return self.decode_no_branches(decoder_input, concepts_final)
        if variant == "repetitive_concepts":
            return self.decode(decoder_input, [concepts_final] * self.cfg.dec_layers)
        return self.decode(decoder_input, snapshots)

    # -- full pass ----------------------------------------------------------

    def forward(self, images: np.ndarray, ratio: float, seed: int,
                variant: str | None = None, prototypes=None,
                mask_shape: str = "random", plan: MaskPlan | None = None) -> ForwardOutput:
        """Deterministic full pass over a batch of [H, W, C] images."""
        variant = variant or self.cfg.variant
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        images = np.asarray(images, dtype=self.cfg.np_dtype)
        if images.ndim == 3:
            images = images[None]
        cfg = self.cfg
        if images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
            raise ConfigError(
                f"image shape {images.shape[1:]} does not match config "
                f"{(cfg.height, cfg.width, cfg.channels)}")
        patches_np = patchify(images, cfg.patch_size)
        if plan is None:
            plan = make_mask_plan(cfg.num_patches, ratio, seed, mask_shape)
        proto_t = None
        if variant == "fixed_concepts":
            if prototypes is None:
                raise ContractError("fixed_concepts needs per-sample prototype embeddings")
            proto_t = prototypes if isinstance(prototypes, Tensor) else Tensor(
                np.asarray(prototypes, dtype=cfg.np_dtype))
        patches_t = Tensor(patches_np)
        vis, snapshots, concepts = self.encode(patches_t, plan, variant, proto_t)
        decoder_input = self.assemble_decoder_input(vis, plan)
        recon = self.decode_variant(decoder_input, snapshots, concepts, variant)
        return ForwardOutput(recon_patches=recon, concepts_final=concepts,
                             visible_latents=vis, snapshots=snapshots, plan=plan,
                             decoder_input=decoder_input, target_patches=patches_np,
                             variant=variant, prototypes=proto_t)

    def forward_variant(self, images, ratio, seed, variant, **kw) -> ForwardOutput:
        return self.forward(images, ratio, seed, variant=variant, **kw)

    def decode_with_replaced_concepts(self, fwd: "ForwardOutput", positions,
                                      rows: Tensor):
        """Decode with concept rows at ``positions`` replaced by ``rows``,
        applied consistently to the final concepts and to every concept
        tensor the decoder consumes. Returns (recon_patches, replaced_concepts).
        """
        c_hat = replace_concept_rows(fwd.concepts_final, positions, rows)
        if fwd.variant == "no_branches":
            recon = self.decode_no_branches(fwd.decoder_input, c_hat)
        elif fwd.variant == "repetitive_concepts":
            recon = self.decode(fwd.decoder_input, [c_hat] * self.cfg.dec_layers)
        else:
            snaps = [replace_concept_rows(s, positions, rows) for s in fwd.snapshots]
            recon = self.decode(fwd.decoder_input, snaps)
        return recon, c_hat

    def reencode_concepts(self, patches: Tensor, variant: str | None = None,
                          prototypes: Tensor | None = None) -> Tensor:
        """Encode an in-graph patch tensor with nothing masked; returns final concepts.

        This is the second pass of the disentanglement objective and stays
        differentiable through its input.
        """
        plan = make_mask_plan(self.cfg.num_patches, 0.0, seed=0)
        _, _, concepts = self.encode(patches, plan, variant, prototypes)
        return concepts


# ---------------------------------------------------------------------------
# concept editing


def replace_concept_rows(concepts: Tensor, positions, rows: Tensor) -> Tensor:
    """Replace rows of [b, M, E] concepts at ``positions`` with ``rows``.

    ``rows`` is [k, E] (shared across batch) or [b, k, E]; all other rows
    pass through untouched and keep their gradients.
    """
    m = concepts.shape[-2]
    positions = np.asarray(positions, dtype=np.intp)
    keep = np.ones((m, concepts.shape[-1]), dtype=concepts.dtype)
    keep[positions] = 0.0
    kept = ag.mul(concepts, Tensor(keep))
    placed = ag.scatter_rows(rows, positions, m)
    return ag.add(kept, placed)


def edit_concepts(concepts: Tensor, edits) -> Tensor:
    """Apply (position, target row) replacements; duplicates are rejected."""
    if not edits:
        return concepts
    m = concepts.shape[-2]
    positions = [p for p, _ in edits]
    if len(set(positions)) != len(positions):
        raise ContractError(f"duplicate edit positions: {sorted(positions)}")
    for p in positions:
        if not 0 <= p < m:
            raise ContractError(f"edit position {p} outside [0, {m})")
    rows = np.stack([np.asarray(r.data if isinstance(r, Tensor) else r)
                     for _, r in edits]).astype(concepts.dtype)
    return replace_concept_rows(concepts, positions, Tensor(rows))
