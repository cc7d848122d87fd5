"""Loop-based numpy reference for windowed multi-head attention with a
relative position bias. Written independently of the library's vectorised
window partition/merge so that both can be checked against each other."""

import numpy as np


def reference_attention(x, x_t, wq_s, wq_t, heads, window, rel_table=None, out_w=None, out_b=None,
                        separate_token=False, scale=None):
    """x: (b, H, W, d); x_t: (b, d_t); wq_s: (d, 3d); wq_t: (d_t, 3d) or None."""
    b, H, W, d = x.shape
    wh, ww = (window, window) if window else (H, W)
    dh = d // heads
    scale = 1.0 / np.sqrt(dh) if scale is None else scale
    qkv = x @ wq_s
    t_qkv = x_t @ wq_t if wq_t is not None else np.zeros((b, 3 * d))
    if not separate_token:
        qkv = qkv + t_qkv[:, None, None, :]
    y = np.zeros_like(x)
    side = max(wh, ww)
    for n in range(b):
        for oy in range(0, H, wh):
            for ox in range(0, W, ww):
                coords = [(oy + i, ox + j) for i in range(wh) for j in range(ww)]
                toks = np.array([qkv[n, cy, cx] for cy, cx in coords])
                q, k, v = toks[:, :d], toks[:, d:2 * d], toks[:, 2 * d:]
                if separate_token:
                    k = np.vstack([k, t_qkv[n, d:2 * d]])
                    v = np.vstack([v, t_qkv[n, 2 * d:]])
                for h in range(heads):
                    sl = slice(h * dh, (h + 1) * dh)
                    logits = q[:, sl] @ k[:, sl].T * scale
                    if rel_table is not None:
                        for a, (ay, ax) in enumerate(coords):
                            for c, (cy, cx) in enumerate(coords):
                                idx = (ay - cy + side - 1) * (2 * side - 1) + (ax - cx + side - 1)
                                logits[a, c] += rel_table[idx, h]
                    logits -= logits.max(axis=1, keepdims=True)
                    p = np.exp(logits)
                    p /= p.sum(axis=1, keepdims=True)
                    out = p @ v[:, sl]
                    for a, (ay, ax) in enumerate(coords):
                        y[n, ay, ax, sl] = out[a]
    if out_w is not None:
        y = y @ out_w + (out_b if out_b is not None else 0.0)
    return y
