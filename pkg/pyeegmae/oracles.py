"""@ingroup pyeegmae
@file
Brute-force reference computations written as explicit loops over examples, positions and heads.

They are deliberately independent of the vectorized code paths (no folding, no -inf masking) and are shared by the
unit tests and the verify command.
"""
import math

import numpy as np

from .attention import AttentionKind

def _weights(params):
    return tuple(np.asarray(w.data, dtype=np.float64) for w in (params.w_q, params.w_k, params.w_v, params.w_o))

def _attend_one(query, keys, values, live, n_heads):
    """One query against a list of keys; heads split the width into contiguous slices.
    """
    width = query.shape[0]
    head_dim = width // n_heads
    out = np.zeros(width)
    for head in range(n_heads):
        part = slice(head * head_dim, (head + 1) * head_dim)
        scores = [float(np.dot(query[part], keys[j][part])) / math.sqrt(head_dim) if live[j] else None
                  for j in range(len(keys))]
        finite = [s for s in scores if s is not None]
        if not finite:
            continue
        peak = max(finite)
        exps = [math.exp(s - peak) if s is not None else 0.0 for s in scores]
        total = sum(exps)
        for j, e in enumerate(exps):
            if e:
                out[part] += (e / total) * values[j][part]
    return out

def sequence_attention(tokens, params, live=None):
    """Multi-head self-attention over a list of d_e vectors.

    @param tokens An S x d_e array.
    @param live Optionally, S booleans marking attendable keys.
    @returns An S x d_e array.
    """
    w_q, w_k, w_v, w_o = _weights(params)
    tokens = np.asarray(tokens, dtype=np.float64)
    live = [True] * len(tokens) if live is None else list(live)
    q = [w_q.dot(t) for t in tokens]
    k = [w_k.dot(t) for t in tokens]
    v = [w_v.dot(t) for t in tokens]
    return np.array([w_o.dot(_attend_one(q[i], k, v, live, params.n_heads)) for i in range(len(tokens))])

def _mask(grid, pad_mask):
    return np.ones(grid.shape[:2], dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)

def intra_channel(grid, params, pad_mask=None):
    """@param grid A B x C x N_p x d_e array.
    """
    pad_mask = _mask(grid, pad_mask)
    batch, channels, patches, _ = grid.shape
    out = np.zeros(grid.shape)
    for b in range(batch):
        for c in range(channels):
            out[b, c] = sequence_attention(grid[b, c], params, [pad_mask[b, c]] * patches)
    return out

def inter_channel(grid, params, pad_mask=None):
    pad_mask = _mask(grid, pad_mask)
    batch, _, patches, _ = grid.shape
    out = np.zeros(grid.shape)
    for b in range(batch):
        for i in range(patches):
            out[b, :, i] = sequence_attention(grid[b, :, i], params, pad_mask[b])
    return out

def standard(grid, params, pad_mask=None):
    pad_mask = _mask(grid, pad_mask)
    batch, channels, patches, width = grid.shape
    out = np.zeros(grid.shape)
    for b in range(batch):
        tokens = [grid[b, c, i] for c in range(channels) for i in range(patches)]
        live = [pad_mask[b, c] for c in range(channels) for _ in range(patches)]
        out[b] = sequence_attention(np.array(tokens).reshape(-1, width), params, live).reshape(channels, patches,
                                                                                               width)
    return out

def two_axis(grid, params_c, params_p, pad_mask=None):
    return 0.5 * (inter_channel(grid, params_c, pad_mask) + intra_channel(grid, params_p, pad_mask))

def bottleneck(grid, params, pad_mask=None):
    """Pooled channel attention chained into pooled patch attention, evaluated token by token.
    """
    pad_mask = _mask(grid, pad_mask)
    w_q, w_k, w_v, w_o = _weights(params)
    batch, channels, patches, width = grid.shape
    out = np.zeros(grid.shape)
    for b in range(batch):
        q = np.array([[w_q.dot(grid[b, c, i]) for i in range(patches)] for c in range(channels)])
        k = np.array([[w_k.dot(grid[b, c, i]) for i in range(patches)] for c in range(channels)])
        v = np.array([[w_v.dot(grid[b, c, i]) for i in range(patches)] for c in range(channels)])
        q_bar, k_bar, v_bar = q.mean(axis=1), k.mean(axis=1), v.mean(axis=1)
        real = [c for c in range(channels) if pad_mask[b, c]]
        q_tilde = np.mean([q[c] for c in real], axis=0)
        k_tilde = np.mean([k[c] for c in real], axis=0)
        for c in range(channels):
            for i in range(patches):
                across = _attend_one(q_bar[c], list(k_bar), list(v_bar), pad_mask[b], params.n_heads)
                values = [across] * patches
                within = _attend_one(q_tilde[i], list(k_tilde), values, [pad_mask[b, c]] * patches, params.n_heads)
                out[b, c, i] = w_o.dot(within)
    return out

def attention_layer(layer, grid, pad_mask=None):
    """Dispatches an AttentionLayer to its loop oracle.
    """
    kind = layer.kind
    if kind is AttentionKind.Intra:
        return intra_channel(grid, layer.params, pad_mask)
    if kind is AttentionKind.Inter:
        return inter_channel(grid, layer.params, pad_mask)
    if kind is AttentionKind.Standard:
        return standard(grid, layer.params, pad_mask)
    if kind is AttentionKind.TwoAxis:
        return two_axis(grid, layer.params, layer.params_p, pad_mask)
    return bottleneck(grid, layer.params, pad_mask)

def _layer_norm(x, gain, bias, eps):
    out = np.zeros(x.shape)
    for index in np.ndindex(x.shape[:-1]):
        row = x[index]
        mean = sum(row) / len(row)
        variance = sum((r - mean) ** 2 for r in row) / len(row)
        out[index] = (row - mean) / math.sqrt(variance + eps) * gain + bias
    return out

def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))

def encoder(model, tokens, pad_mask, eps=1e-5):
    """Unrolled pre-norm encoder over a B x C x N_p x d_e token array, followed by the final layer norm.
    """
    def data(tensor):
        return np.asarray(tensor.data, dtype=np.float64)
    x = np.asarray(tokens, dtype=np.float64)
    for block in model.blocks:
        normed = _layer_norm(x, data(block.norm_attention.gain), data(block.norm_attention.bias), eps)
        x = x + attention_layer(block.attention, normed, pad_mask)
        normed = _layer_norm(x, data(block.norm_mlp.gain), data(block.norm_mlp.bias), eps)
        mlp = block.mlp
        hidden = _gelu(np.einsum('...i,oi->...o', normed, data(mlp.w_in)) + data(mlp.b_in))
        x = x + np.einsum('...i,oi->...o', hidden, data(mlp.w_out)) + data(mlp.b_out)
    return _layer_norm(x, data(model.final_norm.gain), data(model.final_norm.bias), eps)

def mean_pool(embeddings, pad_mask):
    batch, channels, patches, width = embeddings.shape
    out = np.zeros((batch, width))
    for b in range(batch):
        terms = [embeddings[b, c, i] for c in range(channels) if pad_mask[b, c] for i in range(patches)]
        out[b] = sum(terms) / len(terms)
    return out

def reconstruction_terms(patches, predicted, mask, pad_mask=None):
    """@returns (l_masked, l_visible) summed position by position.
    """
    batch, channels, positions, _ = patches.shape
    masked, visible = [], []
    for b in range(batch):
        for c in range(channels):
            if pad_mask is not None and not pad_mask[b, c]:
                continue
            for i in range(positions):
                error = float(sum((p - q) ** 2 for p, q in zip(patches[b, c, i], predicted[b, c, i])))
                (masked if mask[b, c, i] else visible).append(error)
    return sum(masked) / len(masked), (sum(visible) / len(visible) if visible else 0.0)
