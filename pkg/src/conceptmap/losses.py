"""The three training objectives and their weighted combination.

* masked reconstruction: mean squared pixel error over masked patch
  positions only (over all positions when nothing is masked).
* frequency-weighted concept alignment: per-slot squared error against
  prototype embeddings, weighted inversely to how often each prototype
  occurs in the batch.
* disentanglement: swap one concept row for its antonym prototype, decode,
  re-encode the reconstruction with nothing masked, and penalize the
  distance between the swapped concepts and the re-encoded ones. Both
  passes stay in the gradient graph.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .model import ConceptMapModel, ForwardOutput, replace_concept_rows


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0         # disentanglement coefficient
    beta: float = 1.0          # concept coefficient
    scale: float = 1.0         # weight magnitude S
    eps_freq: float = 1e-6     # frequency smoothing
    uniform_weights: bool = False  # force w to the balanced-frequency constant

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.scale <= 0:
            raise ConfigError("weight scale must be positive")
        if self.eps_freq <= 0:
            raise ConfigError("frequency smoothing must be positive")


# ---------------------------------------------------------------------------
# reconstruction


def masked_recon_loss(recon: Tensor, target, masked_idx) -> Tensor:
    """MSE averaged over masked positions, then over the batch.

    With an empty index set the average runs over all positions, so a zero
    mask ratio still trains.
    """
    target_data = target.data if isinstance(target, Tensor) else np.asarray(
        target, dtype=recon.dtype)
    if recon.shape != target_data.shape:
        raise DimensionError(
            f"reconstruction {recon.shape} vs target {target_data.shape}")
    n = recon.shape[-2]
    masked_idx = np.asarray(masked_idx, dtype=np.intp)
    if masked_idx.size and (masked_idx.min() < 0 or masked_idx.max() >= n):
        raise IndexError(f"masked index outside [0, {n})")
    if masked_idx.size == 0:
        masked_idx = np.arange(n)
    weight = np.zeros(n, dtype=recon.dtype)
    weight[masked_idx] = 1.0
    batch = int(np.prod(recon.shape[:-2])) if recon.ndim > 2 else 1
    diff = ag.sub(recon, Tensor(target_data))
    per_token = ag.mean_lastdim(ag.mul(diff, diff))
    return ag.mul(ag.sum_all(ag.mul(per_token, Tensor(weight))),
                  1.0 / (batch * masked_idx.size))


# ---------------------------------------------------------------------------
# weighted concept alignment


def concept_weights(prototypes_data: np.ndarray, lw: LossWeights) -> np.ndarray:
    """Per-slot weights S / (freq + eps); frequency is exact row identity
    over the flattened batch collection."""
    b, m = prototypes_data.shape[0], prototypes_data.shape[1]
    if lw.uniform_weights:
        balanced = b / 2.0  # frequency if all 2M prototypes appeared equally often
        return np.full((b, m), lw.scale / (balanced + lw.eps_freq))
    flat = prototypes_data.reshape(b * m, -1)
    counts = Counter(row.tobytes() for row in flat)
    freq = np.array([counts[row.tobytes()] for row in flat], dtype=np.float64)
    return (lw.scale / (freq + lw.eps_freq)).reshape(b, m)


def weighted_concept_loss(concepts: Tensor, prototypes: Tensor, lw: LossWeights,
                          bank=None) -> Tensor:
    """(1/b) * sum_ij w_ij * mean-squared-error of concept row (i, j)."""
    if concepts.shape != prototypes.shape:
        raise DimensionError(f"concepts {concepts.shape} vs prototypes {prototypes.shape}")
    if bank is not None:
        members = {np.asarray(v, dtype=prototypes.dtype).tobytes()
                   for v in bank.all_vectors()}
        for i in range(prototypes.data.shape[0]):
            for j in range(prototypes.data.shape[1]):
                if prototypes.data[i, j].tobytes() not in members:
                    raise ContractError(f"prototype at slot ({i}, {j}) is not a bank vector")
    w = concept_weights(prototypes.data, lw).astype(concepts.dtype)
    b = concepts.shape[0]
    diff = ag.sub(concepts, prototypes)
    per_row = ag.mean_lastdim(ag.mul(diff, diff))      # [b, M]
    return ag.mul(ag.sum_all(ag.mul(per_row, Tensor(w))), 1.0 / b)


# ---------------------------------------------------------------------------
# disentanglement


def sample_single_hot(num_concepts: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over the single-hot vectors of length ``num_concepts``."""
    if num_concepts < 1:
        raise ContractError("need at least one concept")
    hot = np.zeros(num_concepts, dtype=np.int64)
    hot[int(rng.integers(num_concepts))] = 1
    return hot


def _single_hot_position(hot) -> int:
    hot = np.asarray(hot)
    if hot.ndim != 1 or int(hot.sum()) != 1 or not np.isin(hot, (0, 1)).all():
        raise ContractError(f"not a single-hot mask: {hot}")
    return int(np.argmax(hot))


def _swap_targets(rows: np.ndarray, bank, model: ConceptMapModel | None) -> np.ndarray:
    """Bank-space antonym targets for each latent row (nearest-prototype lookup)."""
    vectors = bank.all_vectors()
    compare = (model.project_prototypes_data(vectors)
               if model is not None else vectors)
    compare = compare / np.linalg.norm(compare, axis=-1, keepdims=True)
    norms = np.linalg.norm(rows, axis=-1)
    out = np.empty((rows.shape[0], vectors.shape[-1]), dtype=vectors.dtype)
    for i, row in enumerate(rows):
        if norms[i] == 0.0:
            warnings.warn("zero-norm concept row; swapping to the first concept's antonym")
            out[i] = bank.antonym[0]
            continue
        cos = compare @ (row / norms[i])
        out[i] = vectors[bank.antonym_index(int(np.argmax(cos)))]
    return out


def antonym_swap(concepts: Tensor, hot, bank, model: ConceptMapModel | None = None) -> Tensor:
    """Replace the single selected concept row with the antonym prototype of
    its nearest bank vector (cosine similarity); other rows pass through."""
    j = _single_hot_position(hot)
    targets = _swap_targets(concepts.data[:, j, :], bank, model)
    rows = Tensor(targets[:, None, :].astype(concepts.dtype))
    if model is not None:
        rows = model.project_prototypes(rows)
    return replace_concept_rows(concepts, [j], rows)


def disentangle_from_forward(model: ConceptMapModel, fwd: ForwardOutput,
                             hot, bank) -> Tensor:
    """Disentanglement term reusing an existing forward pass."""
    j = _single_hot_position(hot)
    targets = _swap_targets(fwd.concepts_final.data[:, j, :], bank, model)
    rows = model.project_prototypes(
        Tensor(targets[:, None, :].astype(fwd.concepts_final.dtype)))
    # the same replacement row lands in every concept tensor the decoder sees
    recon, c_hat = model.decode_with_replaced_concepts(fwd, [j], rows)
    c_tilde = model.reencode_concepts(recon, variant=fwd.variant,
                                      prototypes=fwd.prototypes)
    diff = ag.sub(c_hat, c_tilde)
    return ag.mean_all(ag.mul(diff, diff))


def disentangle_loss(model: ConceptMapModel, images, ratio: float, seed: int,
                     hot, bank, prototypes=None) -> Tensor:
    """Standalone double-pass disentanglement loss."""
    fwd = model.forward(images, ratio, seed, prototypes=prototypes)
    return disentangle_from_forward(model, fwd, hot, bank)


# ---------------------------------------------------------------------------
# combination


def total_loss(parts: dict, lw: LossWeights) -> Tensor:
    """Weighted sum of the loss parts; missing parts count as zero."""
    total = None
    for name, coeff in (("recon", 1.0), ("disentangle", lw.alpha), ("concept", lw.beta)):
        part = parts.get(name)
        if part is None:
            continue
        if np.isnan(part.data).any():
            raise NumericError(f"loss component {name!r} is NaN")
        if coeff == 0.0:
            continue
        term = part if coeff == 1.0 else ag.mul(part, coeff)
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ContractError("no loss parts supplied")
    return total
