"""Network building blocks: spatial graph convolution, the two-branch
adaptive temporal convolution, the combined spatio-temporal block with
residual, cross-scale fusion, scale-attention fusion, and the classifier
head."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .graphs import SkeletonGraph
from .tensor import Parameter


def uniform_init(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; submodules and parameters are found
    by walking instance attributes in definition order."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            path = f"{prefix}.{attr}" if prefix else attr
            yield from _walk(path, value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def assign_parameter_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name


def _walk(path, value):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{path}.{i}", item)


class BatchNorm(Module):
    """Per-channel batch norm over (batch, time, vertex)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Parameter(np.zeros(channels), requires_grad=False)
        self.running_var = Parameter(np.ones(channels), requires_grad=False)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, momentum=self.momentum, eps=self.eps,
        )


class TemporalConv(Module):
    """1-D convolution along time with odd kernel and 'same' padding."""

    def __init__(self, cin, cout, kernel, stride, rng, bias=True):
        self.weight = Parameter(uniform_init(rng, (cout, cin, kernel), cin * kernel))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.kernel = kernel
        self.stride = stride

    def forward(self, x):
        return T.temporal_conv(x, self.weight, self.bias, stride=self.stride)


class GcnLayer(Module):
    """Spatial graph convolution: neighbourhood aggregation by the
    normalized adjacency followed by a 1x1 channel map."""

    def __init__(self, cin, cout, graph: SkeletonGraph, rng):
        self.weight = Parameter(uniform_init(rng, (cin, cout), cin))
        self.bias = Parameter(np.zeros(cout))
        self.graph = graph

    def forward(self, x):
        if x.shape[-1] != self.graph.vertex_count:
            raise T.ShapeError(
                f"gcn: input has {x.shape[-1]} vertices, "
                f"graph has {self.graph.vertex_count}"
            )
        agg = T.graph_aggregate(x, self.graph.normalized_adjacency)
        return T.channel_linear(agg, self.weight, self.bias)


class AsTcn(Module):
    """Two temporal convolutions with different kernels, mixed per channel
    by input-dependent softmax weights (selective-kernel style)."""

    def __init__(self, channels, k1, k2, stride, rng):
        if k1 == k2:
            raise ValueError(f"branch kernels must differ, got {k1} and {k2}")
        self.tcn1 = TemporalConv(channels, channels, k1, stride, rng)
        self.tcn2 = TemporalConv(channels, channels, k2, stride, rng)
        d = max(channels // 4, 16)
        self.squeeze_w = Parameter(uniform_init(rng, (channels, d), channels))
        self.squeeze_b = Parameter(np.zeros(d))
        self.head1_w = Parameter(uniform_init(rng, (d, channels), d))
        self.head1_b = Parameter(np.zeros(channels))
        self.head2_w = Parameter(uniform_init(rng, (d, channels), d))
        self.head2_b = Parameter(np.zeros(channels))

    def forward(self, x, return_weights=False):
        u1 = self.tcn1.forward(x)
        u2 = self.tcn2.forward(x)
        z = T.mean(u1 + u2, axes=(2, 3))                  # [B, C]
        h = T.relu(T.linear(z, self.squeeze_w, self.squeeze_b))
        logits = T.stack(
            [T.linear(h, self.head1_w, self.head1_b),
             T.linear(h, self.head2_w, self.head2_b)],
            axis=1,
        )                                                  # [B, 2, C]
        weights = T.softmax(logits, axis=1)
        b, c = z.shape
        a1 = T.reshape(T.index_axis(weights, 1, 0), (b, c, 1, 1))
        a2 = T.reshape(T.index_axis(weights, 1, 1), (b, c, 1, 1))
        out = a1 * u1 + a2 * u2
        if return_weights:
            return out, weights
        return out


class AsstGcnBlock(Module):
    """GCN -> BN -> ReLU -> adaptive temporal conv, plus a residual path
    (identity, or a strided 1x1 projection when shapes change).

    ``temporal_mode`` selects the adaptive two-branch module ("astcn") or
    a single fixed-kernel convolution ("single_tcn", ablation baseline).
    """

    def __init__(self, cin, cout, graph, stride, kernels, rng,
                 temporal_mode="astcn"):
        self.gcn = GcnLayer(cin, cout, graph, rng)
        self.bn = BatchNorm(cout)
        if temporal_mode == "astcn":
            self.temporal = AsTcn(cout, kernels[0], kernels[1], stride, rng)
        elif temporal_mode == "single_tcn":
            self.temporal = TemporalConv(cout, cout, kernels[0], stride, rng)
        else:
            raise ValueError(f"unknown temporal_mode {temporal_mode!r}")
        if cin == cout and stride == 1:
            self.residual = None
        else:
            self.residual = TemporalConv(cin, cout, 1, stride, rng, bias=False)

    def forward(self, x, training):
        h = T.relu(self.bn.forward(self.gcn.forward(x), training))
        v = self.temporal.forward(h)
        r = x if self.residual is None else self.residual.forward(x)
        return v + r


class SpatialAttention(Module):
    """Per-vertex gate from channel statistics (mean and a smooth max),
    pushed through a small MLP and a sigmoid."""

    def __init__(self, rng, hidden=8):
        self.w1 = Parameter(uniform_init(rng, (2, hidden), 2))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(uniform_init(rng, (hidden, 1), hidden))
        self.b2 = Parameter(np.zeros(1))

    def forward(self, x):
        avg = T.mean(x, axes=(1,), keepdims=True)               # [B,1,T,V]
        peak = T.logsumexp(x, axis=1, keepdims=True)            # smooth max
        stats = T.stack([T.index_axis(avg, 1, 0), T.index_axis(peak, 1, 0)], axis=1)
        h = T.relu(T.channel_linear(stats, self.w1, self.b1))
        gate = T.sigmoid(T.channel_linear(h, self.w2, self.b2))  # [B,1,T,V]
        return x * gate


class CsfmBlock(Module):
    """Cross-scale fusion: learn a row-stochastic rectangular adjacency
    between the vertices of two scales from attention-enhanced embeddings,
    then pass messages from the source scale into the target scale.

    The target scale's features come first; the output lives on the
    target scale's vertices.
    """

    def __init__(self, channels, rng):
        d = max(channels // 4, 8)
        self.attn_a = SpatialAttention(rng)
        self.attn_b = SpatialAttention(rng)
        self.embed_a = Parameter(uniform_init(rng, (channels, d), channels))
        self.embed_b = Parameter(uniform_init(rng, (channels, d), channels))
        self.mlp_a1 = Parameter(uniform_init(rng, (d, d), d))
        self.mlp_a1_b = Parameter(np.zeros(d))
        self.mlp_a2 = Parameter(uniform_init(rng, (d, d), d))
        self.mlp_a2_b = Parameter(np.zeros(d))
        self.mlp_b1 = Parameter(uniform_init(rng, (d, d), d))
        self.mlp_b1_b = Parameter(np.zeros(d))
        self.mlp_b2 = Parameter(uniform_init(rng, (d, d), d))
        self.mlp_b2_b = Parameter(np.zeros(d))
        self.out_w = Parameter(uniform_init(rng, (channels, channels), channels))
        self.out_b = Parameter(np.zeros(channels))

    def _embed(self, x, attn, embed_w, w1, b1, w2, b2):
        e = T.channel_linear(attn.forward(x), embed_w)
        e = T.channel_linear(T.relu(T.channel_linear(e, w1, b1)), w2, b2)
        return T.mean(e, axes=(2,))                             # [B, d, V]

    def attention(self, xa, xb):
        """Row-stochastic [B, Va, Vb] adjacency between the two scales."""
        za = self._embed(xa, self.attn_a, self.embed_a,
                         self.mlp_a1, self.mlp_a1_b, self.mlp_a2, self.mlp_a2_b)
        zb = self._embed(xb, self.attn_b, self.embed_b,
                         self.mlp_b1, self.mlp_b1_b, self.mlp_b2, self.mlp_b2_b)
        return T.softmax(T.vertex_similarity(za, zb), axis=2)

    def forward(self, xa, xb, return_attention=False):
        if xa.shape[:3] != xb.shape[:3]:
            raise T.ShapeError(
                f"csfm: feature maps {xa.shape} and {xb.shape} must share B, C, T"
            )
        a = self.attention(xa, xb)
        msg = T.cross_scale_aggregate(xb, a)
        out = xa + T.channel_linear(msg, self.out_w, self.out_b)
        if return_attention:
            return out, a
        return out


class ScaleAttentionFusion(Module):
    """Convex per-channel combination of same-shape features from all
    scales; the weights are a softmax over scales driven by pooled
    features."""

    def __init__(self, channels, num_scales, rng):
        self.gate_w = [
            Parameter(uniform_init(rng, (channels, channels), channels))
            for _ in range(num_scales)
        ]
        self.gate_b = [Parameter(np.zeros(channels)) for _ in range(num_scales)]

    def forward(self, features, return_weights=False):
        if len(features) != len(self.gate_w):
            raise T.ShapeError(
                f"fusion built for {len(self.gate_w)} scales, got {len(features)}"
            )
        base = features[0].shape
        for f in features[1:]:
            if f.shape != base:
                raise T.ShapeError(f"fusion inputs differ: {base} vs {f.shape}")
        scores = [
            T.linear(T.mean(f, axes=(2, 3)), w, b)
            for f, w, b in zip(features, self.gate_w, self.gate_b)
        ]
        weights = T.softmax(T.stack(scores, axis=1), axis=1)    # [B, S, C]
        b, c = scores[0].shape
        out = None
        for s, f in enumerate(features):
            ws = T.reshape(T.index_axis(weights, 1, s), (b, c, 1, 1))
            out = ws * f if out is None else out + ws * f
        if return_weights:
            return out, weights
        return out


class ClassifierHead(Module):
    """Global average pool, final linear map, softmax distribution."""

    def __init__(self, channels, num_classes, rng):
        self.weight = Parameter(uniform_init(rng, (channels, num_classes), channels))
        self.bias = Parameter(np.zeros(num_classes))

    def forward(self, x):
        z = T.global_avg_pool(x)
        return T.softmax(T.linear(z, self.weight, self.bias), axis=1)
