"""Regenerate hand_forward.json: a 1-layer, 1-head encoder evaluated with scalar loops.

Uses only the math module, independent of the package, so the frozen logits
are an external oracle for the vectorised forward pass.
Run: python3 tests/data/make_hand_forward.py
"""

import json
import math
from pathlib import Path

D, F, V, N = 3, 4, 5, 2
EPS = 1e-12


def fixed(rows, cols, salt):
    """Two-decimal weights from a fixed formula (no RNG involved)."""
    return [[round(math.sin(1.7 * salt + 0.9 * r + 0.45 * c * (r + 1)), 2) for c in range(cols)]
            for r in range(rows)]


def vec(n, salt):
    return fixed(1, n, salt)[0]


weights = {
    "embeddings.token": fixed(V, D, 1),
    "embeddings.position": fixed(3, D, 2),
    "embeddings.norm.gain": [1.2, 0.8, 1.0],
    "embeddings.norm.bias": [0.1, -0.1, 0.05],
}
for i, (name, shape) in enumerate([
        ("attention.query.weight", (D, D)), ("attention.query.bias", (D,)),
        ("attention.key.weight", (D, D)), ("attention.key.bias", (D,)),
        ("attention.value.weight", (D, D)), ("attention.value.bias", (D,)),
        ("attention.output.weight", (D, D)), ("attention.output.bias", (D,)),
        ("attention.norm.gain", (D,)), ("attention.norm.bias", (D,)),
        ("ffn.intermediate.weight", (D, F)), ("ffn.intermediate.bias", (F,)),
        ("ffn.output.weight", (F, D)), ("ffn.output.bias", (D,)),
        ("ffn.norm.gain", (D,)), ("ffn.norm.bias", (D,))], start=3):
    value = fixed(*shape, i) if len(shape) == 2 else vec(shape[0], i)
    if name.endswith("gain"):
        value = [1.0 + 0.5 * x for x in value]
    weights["layers.1." + name] = value
weights["head.weight"] = fixed(D, V, 20)
tokens = [1, 2]


def norm(row, gain, bias):
    mu = sum(row) / len(row)
    var = sum((r - mu) ** 2 for r in row) / len(row)
    return [g * (r - mu) / math.sqrt(var + EPS) + b for r, g, b in zip(row, gain, bias)]


def affine(row, w, b):
    return [sum(row[i] * w[i][j] for i in range(len(row))) + b[j] for j in range(len(b))]


def gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


W = weights
p = "layers.1."
h0 = [norm([W["embeddings.token"][t][k] + W["embeddings.position"][pos][k] for k in range(D)],
           W["embeddings.norm.gain"], W["embeddings.norm.bias"]) for pos, t in enumerate(tokens)]
q = [affine(r, W[p + "attention.query.weight"], W[p + "attention.query.bias"]) for r in h0]
k = [affine(r, W[p + "attention.key.weight"], W[p + "attention.key.bias"]) for r in h0]
v = [affine(r, W[p + "attention.value.weight"], W[p + "attention.value.bias"]) for r in h0]
attn = []
for a in range(N):
    scores = [sum(q[a][c] * k[b][c] for c in range(D)) / math.sqrt(D) for b in range(N)]
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    attn.append([x / sum(e) for x in e])
ctx = [[sum(attn[a][b] * v[b][c] for b in range(N)) for c in range(D)] for a in range(N)]
o = [affine(r, W[p + "attention.output.weight"], W[p + "attention.output.bias"]) for r in ctx]
h = [norm([h0[a][c] + o[a][c] for c in range(D)], W[p + "attention.norm.gain"],
          W[p + "attention.norm.bias"]) for a in range(N)]
ff = [affine([gelu(x) for x in affine(r, W[p + "ffn.intermediate.weight"],
                                      W[p + "ffn.intermediate.bias"])],
             W[p + "ffn.output.weight"], W[p + "ffn.output.bias"]) for r in h]
h1 = [norm([h[a][c] + ff[a][c] for c in range(D)], W[p + "ffn.norm.gain"], W[p + "ffn.norm.bias"])
      for a in range(N)]
logits = [[sum(r[c] * W["head.weight"][c][j] for c in range(D)) for j in range(V)] for r in h1]

out = {"config": {"num_layers": 1, "num_heads": 1, "hidden_size": D, "ff_size": F,
                  "vocab_size": V, "max_seq_len": 3},
       "tokens": tokens, "weights": weights, "attention": attn, "hidden_1": h1,
       "logits": logits}
Path(__file__).with_name("hand_forward.json").write_text(json.dumps(out, indent=1) + "\n")
