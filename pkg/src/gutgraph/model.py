"""Multi-relation GCN encoder with adversarial and attention objectives.

One GCN stack per relation type embeds every sample twice (original and
feature-shuffled views). A two-stage readout summarizes each relation
graph; a bilinear discriminator scores node/summary pairs; per-head
attention merges the relation-specific embeddings into one matrix. The
joint loss couples the discriminator objective with an attention
alignment term through a trainable, softplus-positive weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import ALL_KINDS, DistanceKind


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    """All trainable tensors, keyed the way checkpoints store them."""

    layers: dict[DistanceKind, list[tuple[Tensor, Tensor]]]
    queries: list[dict[DistanceKind, Tensor]]
    discriminators: dict[DistanceKind, Tensor]
    eta_raw: Tensor
    classifier_w: Tensor
    classifier_b: Tensor

    @property
    def kinds(self) -> tuple[DistanceKind, ...]:
        return tuple(k for k in ALL_KINDS if k in self.layers)

    @property
    def embed_dim(self) -> int:
        return self.layers[self.kinds[0]][-1][0].data.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for kind in self.kinds:
            for i, (w, b) in enumerate(self.layers[kind]):
                out[f"encoder/{kind.value}/layer{i}/weight"] = w
                out[f"encoder/{kind.value}/layer{i}/bias"] = b
        for h, per_kind in enumerate(self.queries):
            for kind in self.kinds:
                out[f"attention/head{h}/{kind.value}/query"] = per_kind[kind]
        for kind in self.kinds:
            out[f"discriminator/{kind.value}/weight"] = self.discriminators[kind]
        out["eta_raw"] = self.eta_raw
        out["classifier/weight"] = self.classifier_w
        out["classifier/bias"] = self.classifier_b
        return out

    def unsupervised_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items()
                if not k.startswith("classifier/")}


def _uniform_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(rows)  # fan-in is the input-side dimension
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_model_params(kinds, n_features: int, embed_dim: int, gcn_layers: int,
                      bins: int, heads: int, two_stage_summary: bool,
                      rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases,
    zero loss-weight raw scalar. Draw order is fixed so a seed pins
    every tensor."""
    if embed_dim < 1 or gcn_layers < 1 or bins < 1 or heads < 1:
        raise ValueError("embed_dim, gcn_layers, bins and heads must be positive")
    kinds = tuple(kinds)
    summary_dim = embed_dim + bins if two_stage_summary else embed_dim
    layers: dict[DistanceKind, list[tuple[Tensor, Tensor]]] = {}
    for kind in kinds:
        stack = []
        in_dim = n_features
        for _ in range(gcn_layers):
            w = Tensor(_uniform_init(rng, in_dim, embed_dim), requires_grad=True)
            b = Tensor(np.zeros((1, embed_dim)), requires_grad=True)
            stack.append((w, b))
            in_dim = embed_dim
        layers[kind] = stack
    queries = []
    for _ in range(heads):
        queries.append({kind: Tensor(_uniform_init(rng, embed_dim, 1), requires_grad=True)
                        for kind in kinds})
    discriminators = {kind: Tensor(_uniform_init(rng, summary_dim, embed_dim),
                                   requires_grad=True)
                      for kind in kinds}
    return ModelParams(
        layers=layers,
        queries=queries,
        discriminators=discriminators,
        eta_raw=Tensor(np.zeros((1, 1)), requires_grad=True),
        classifier_w=Tensor(_uniform_init(rng, embed_dim, 2), requires_grad=True),
        classifier_b=Tensor(np.zeros((1, 2)), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# encoder and readout


def gcn_forward(norm_adj: Tensor, x: Tensor,
                layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """relu(A_norm @ H @ W + b) stacked; the normalized adjacency is
    applied at every layer and the last layer keeps its relu."""
    h = x
    for w, b in layers:
        h = ad.relu(ad.add_bias(ad.matmul(ad.matmul(norm_adj, h), w), b))
    return h


def node_summary(h: Tensor) -> Tensor:
    """Node-level readout: sigmoid of the column means, 1 x D,
    differentiable."""
    return ad.sigmoid(ad.mean_rows(h))


def value_histogram(values: np.ndarray, bins: int,
                    weighting: str = "magnitude") -> np.ndarray:
    """Graph-level readout: histogram of all embedding values, 1 x K.

    Bins split [min, max] uniformly with the top edge closed; the bin
    range is recomputed from the values on every call. Each value
    contributes its magnitude |x| ("magnitude") or one count ("count");
    masses are normalized to sum to one. Degenerate inputs: if all
    magnitudes are zero the histogram is uniform; if all values are
    equal (nonzero) the whole mass lands in bin 0, where
    (x - min) / range reads as zero.

    Accumulation runs over sorted values so the result is bit-identical
    under any reordering of the input.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if weighting not in ("magnitude", "count"):
        raise ValueError(f"unknown weighting {weighting!r}")
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if flat.size == 0:
        raise ValueError("empty value set")
    mags = np.abs(flat)
    if mags.sum() == 0.0:
        return np.full((1, bins), 1.0 / bins)
    lo, hi = flat[0], flat[-1]
    weights = mags if weighting == "magnitude" else np.ones_like(flat)
    if lo == hi:
        out = np.zeros((1, bins))
        out[0, 0] = 1.0
        return out
    width = (hi - lo) / bins
    idx = np.clip(np.floor((flat - lo) / width).astype(np.int64), 0, bins - 1)
    mass = np.bincount(idx, weights=weights, minlength=bins)
    return (mass / mass.sum()).reshape(1, bins)


def graph_summary(h: Tensor, bins: int, weighting: str = "magnitude",
                  frozen_histogram: np.ndarray | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Two-stage readout: (summary 1x(D+K), node-level part 1xD,
    histogram array). The histogram enters as a constant, so gradients
    flow only through the node-level part."""
    p = node_summary(h)
    q = frozen_histogram if frozen_histogram is not None \
        else value_histogram(h.data, bins, weighting)
    summary = ad.concat_cols(p, ad.constant(q))
    return summary, p, np.asarray(q)


# ---------------------------------------------------------------------------
# merging


def attention_merge(embeddings: list[Tensor],
                    queries_per_head: list[dict[DistanceKind, Tensor]],
                    kinds: tuple[DistanceKind, ...],
                    return_weights: bool = False):
    """Per head, per node: softmax over relation types of query . H_i,
    then the weighted sum of the relation embeddings; heads are
    averaged. A single relation type merges to itself exactly (weights
    forced to 1)."""
    if len(embeddings) != len(kinds) or not embeddings:
        raise ValueError(f"{len(embeddings)} embeddings for {len(kinds)} kinds")
    n = embeddings[0].data.shape[0]
    if len(embeddings) == 1:
        weights = [np.ones((n, 1))] * len(queries_per_head)
        return (embeddings[0], weights) if return_weights else embeddings[0]
    head_outputs = []
    head_weights = []
    for queries in queries_per_head:
        scores = None
        for h_t, kind in zip(embeddings, kinds):
            s = ad.matmul(h_t, queries[kind])  # N x 1
            scores = s if scores is None else ad.concat_cols(scores, s)
        w = ad.softmax_rows(scores)  # N x T
        merged = None
        for t, h_t in enumerate(embeddings):
            part = ad.scale_rows(h_t, ad.slice_cols(w, t, t + 1))
            merged = part if merged is None else ad.add(merged, part)
        head_outputs.append(merged)
        head_weights.append(w.data.copy())
    out = head_outputs[0]
    for ho in head_outputs[1:]:
        out = ad.add(out, ho)
    out = ad.mul_scalar(out, 1.0 / len(head_outputs))
    return (out, head_weights) if return_weights else out


def average_merge(embeddings: list[Tensor]) -> Tensor:
    """Unweighted mean over relation types (attention ablation)."""
    if not embeddings:
        raise ValueError("nothing to merge")
    if len(embeddings) == 1:
        return embeddings[0]
    out = embeddings[0]
    for h_t in embeddings[1:]:
        out = ad.add(out, h_t)
    return ad.mul_scalar(out, 1.0 / len(embeddings))


# ---------------------------------------------------------------------------
# discriminator and losses


def discriminator_score(summary: Tensor, node: Tensor, weight: Tensor) -> Tensor:
    """sigmoid(g^T W h) for one summary/node pair, both given as rows."""
    return ad.sigmoid(ad.matmul(ad.matmul(summary, weight), ad.transpose(node)))


def _discriminator_logits(summary: Tensor, h: Tensor, weight: Tensor) -> Tensor:
    # u = g W (1 x D), then one logit per node: H u^T.
    u = ad.matmul(summary, weight)
    return ad.matmul(h, ad.transpose(u))


def adversarial_loss(summaries: list[Tensor], positives: list[Tensor],
                     negatives: list[Tensor], weights: list[Tensor]) -> Tensor:
    """Mean binary cross-entropy of the discriminator over all
    2 * N * |T| (summary, node) pairs: positives score toward 1,
    shuffled negatives toward 0. Computed through softplus on the
    logits, so extreme scores stay finite. Always >= 0."""
    n = positives[0].data.shape[0]
    count = 2 * n * len(summaries)
    total = None
    for g, pos, neg, w in zip(summaries, positives, negatives, weights):
        lp = _discriminator_logits(g, pos, w)
        ln = _discriminator_logits(g, neg, w)
        # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
        term = ad.add(ad.sum_all(ad.softplus(ad.mul_scalar(lp, -1.0))),
                      ad.sum_all(ad.softplus(ln)))
        total = term if total is None else ad.add(total, term)
    return ad.mul_scalar(total, 1.0 / count)


def global_target(node_parts: list[Tensor], n_rows: int) -> Tensor:
    """Average of the node-level summaries, broadcast to one row per
    node. Built with a ones-matrix product so gradients flow back into
    the summaries (this is not a stop-gradient)."""
    avg = node_parts[0]
    for p in node_parts[1:]:
        avg = ad.add(avg, p)
    avg = ad.mul_scalar(avg, 1.0 / len(node_parts))
    ones = ad.constant(np.ones((n_rows, 1)))
    return ad.matmul(ones, avg)


def hybrid_attention_loss(target: Tensor, merged_pos: Tensor,
                          merged_neg: Tensor) -> Tensor:
    """sum((P - X)^2) - sum((P - X_shuffled)^2); may be negative."""
    pos = ad.sum_all(ad.square(ad.sub(target, merged_pos)))
    neg = ad.sum_all(ad.square(ad.sub(target, merged_neg)))
    return ad.sub(pos, neg)


def joint_loss(l_adv: Tensor | None, l_hybrid: Tensor, eta_raw: Tensor) -> Tensor:
    """l_adv + softplus(eta_raw) * l_hybrid; the softplus keeps the
    trainable weight positive (softplus(0) = ln 2 at init)."""
    weighted = ad.mul(ad.softplus(eta_raw), l_hybrid)
    return weighted if l_adv is None else ad.add(l_adv, weighted)


# ---------------------------------------------------------------------------
# classifier head


def classifier_logits(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def predict_proba(embeddings: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """P(class 1) per row from the linear head, via stable softmax."""
    z = embeddings @ w + b
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


# ---------------------------------------------------------------------------
# one full pass


@dataclass
class ForwardResult:
    loss: Tensor
    adversarial: float
    hybrid: float
    histograms: dict[DistanceKind, np.ndarray] = field(default_factory=dict)
    merged: Tensor | None = None


def joint_forward(x: np.ndarray, x_shuffled: np.ndarray,
                  norm_adjs: dict[DistanceKind, np.ndarray],
                  params: ModelParams, *, bins: int,
                  weighting: str = "magnitude",
                  use_attention: bool = True,
                  two_stage_summary: bool = True,
                  use_adversarial: bool = True,
                  frozen_histograms: dict[DistanceKind, np.ndarray] | None = None
                  ) -> ForwardResult:
    """One training pass over every relation type: encode both views,
    summarize, score the discriminator, merge, and combine the losses.
    ``frozen_histograms`` substitutes stored graph-level readouts (they
    are constants under autodiff, so this changes no gradient and lets
    finite-difference harnesses hold them fixed)."""
    kinds = params.kinds
    xt = ad.constant(x)
    xs = ad.constant(x_shuffled)
    n = x.shape[0]
    positives, negatives, summaries, node_parts = [], [], [], []
    histograms: dict[DistanceKind, np.ndarray] = {}
    for kind in kinds:
        adj = ad.constant(norm_adjs[kind])
        h_pos = gcn_forward(adj, xt, params.layers[kind])
        h_neg = gcn_forward(adj, xs, params.layers[kind])
        positives.append(h_pos)
        negatives.append(h_neg)
        if two_stage_summary:
            frozen = None if frozen_histograms is None else frozen_histograms[kind]
            summary, p, q = graph_summary(h_pos, bins, weighting, frozen)
            histograms[kind] = q
            summaries.append(summary)
            node_parts.append(p)
        else:
            summary = ad.mean_rows(h_pos)
            summaries.append(summary)
            node_parts.append(summary)

    l_adv = None
    if use_adversarial:
        discs = [params.discriminators[kind] for kind in kinds]
        l_adv = adversarial_loss(summaries, positives, negatives, discs)

    if use_attention:
        merged_pos = attention_merge(positives, params.queries, kinds)
        merged_neg = attention_merge(negatives, params.queries, kinds)
    else:
        merged_pos = average_merge(positives)
        merged_neg = average_merge(negatives)

    target = global_target(node_parts, n)
    l_hybrid = hybrid_attention_loss(target, merged_pos, merged_neg)
    loss = joint_loss(l_adv, l_hybrid, params.eta_raw)
    return ForwardResult(
        loss=loss,
        adversarial=0.0 if l_adv is None else l_adv.item(),
        hybrid=l_hybrid.item(),
        histograms=histograms,
        merged=merged_pos,
    )


def encode(x: np.ndarray, norm_adjs: dict[DistanceKind, np.ndarray],
           params: ModelParams, use_attention: bool = True) -> np.ndarray:
    """N x D merged embedding of the original view (no tape, no grads)."""
    kinds = params.kinds
    xt = ad.constant(x)
    embeddings = [gcn_forward(ad.constant(norm_adjs[kind]), xt, params.layers[kind])
                  for kind in kinds]
    if use_attention:
        merged = attention_merge(embeddings, params.queries, kinds)
    else:
        merged = average_merge(embeddings)
    return merged.data.copy()
