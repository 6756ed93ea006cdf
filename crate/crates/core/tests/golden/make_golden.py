# SPDX-License-Identifier: MIT OR Apache-2.0
"""Independent reference for the golden 1-layer trace.

Written with plain NumPy loops and no shared code with the Rust crate.
Run `python3 make_golden.py > golden_1layer.json` to regenerate.
"""
import json
import math

import numpy as np

D, DH, DFF, V, MAXLEN, C = 4, 4, 3, 6, 5, 2
EPS = 1e-5


def grid(rows, cols, a, b):
    # deterministic "hand-set" weights: small rationals from a linear pattern
    return [[round(((a * i + b * j + 3) % 7 - 3) / 8.0, 6) for j in range(cols)] for i in range(rows)]


weights = {
    "token_embeddings": grid(V, D, 2, 3),
    "position_embeddings": grid(MAXLEN, D, 3, 1),
    "query": grid(D, DH, 1, 2),
    "query_bias": [0.1, -0.1, 0.0, 0.05],
    "key": grid(D, DH, 2, 5),
    "key_bias": [0.0, 0.2, -0.05, 0.0],
    "value": grid(D, DH, 4, 1),
    "value_bias": [0.05, 0.0, 0.1, -0.1],
    "output": grid(DH, D, 5, 3),
    "attention_output_bias": [0.0, 0.1, 0.0, -0.1],
    "ln1_gain": [1.0, 0.9, 1.1, 1.0],
    "ln1_bias": [0.0, 0.05, 0.0, -0.05],
    "ff_in": grid(D, DFF, 3, 2),
    "ff_in_bias": [0.1, 0.0, -0.1],
    "ff_out": grid(DFF, D, 1, 4),
    "ff_out_bias": [0.0, -0.05, 0.05, 0.0],
    "ln2_gain": [1.0, 1.0, 0.8, 1.2],
    "ln2_bias": [0.1, 0.0, 0.0, -0.1],
    "cls_weight": grid(C, D, 3, 4),
    "cls_bias": [0.2, -0.2],
    "reg_weight": [0.5, -0.25, 0.75, 0.125],
    "reg_bias": 0.3,
    "unembedding": grid(V, D, 5, 2),
    "lm_bias": [0.0, 0.1, -0.1, 0.2, 0.0, -0.2],
}

tokens = [0, 3, 1, 5, 2]
mask_position = 2
n = len(tokens)


def arr(name):
    return np.array(weights[name], dtype=np.float64)


def layer_norm(row, gain, bias):
    mean = sum(row) / len(row)
    var = sum((x - mean) ** 2 for x in row) / len(row)
    return [(x - mean) / math.sqrt(var + EPS) * g + b for x, g, b in zip(row, gain, bias)]


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


tok, pos = arr("token_embeddings"), arr("position_embeddings")
x0 = np.array([tok[t] + pos[i] for i, t in enumerate(tokens)])

q = x0 @ arr("query") + arr("query_bias")
k = x0 @ arr("key") + arr("key_bias")
v = x0 @ arr("value") + arr("value_bias")
alpha = np.zeros((n, n))
for i in range(n):
    s = [sum(q[i, c] * k[j, c] for c in range(DH)) / math.sqrt(DH) for j in range(n)]
    m = max(s)
    e = [math.exp(x - m) for x in s]
    alpha[i] = [x / sum(e) for x in e]
mixed = np.array([[sum(alpha[i, j] * v[j, c] for j in range(n)) for c in range(DH)] for i in range(n)])
attn = mixed @ arr("output") + arr("attention_output_bias")
y = np.array([layer_norm(list(x0[i] + attn[i]), weights["ln1_gain"], weights["ln1_bias"]) for i in range(n)])
pre = y @ arr("ff_in") + arr("ff_in_bias")
act = np.vectorize(gelu)(pre)
ff = act @ arr("ff_out") + arr("ff_out_bias")
out = np.array([layer_norm(list(y[i] + ff[i]), weights["ln2_gain"], weights["ln2_bias"]) for i in range(n)])

cls_logits = [float(x) for x in arr("cls_weight") @ out[0] + arr("cls_bias")]
pred = 0 if cls_logits[0] >= cls_logits[1] else 1
logat_cls = [[float(arr("cls_weight")[c] @ out[i] + weights["cls_bias"][c]) for i in range(n)] for c in range(C)]
reg = [float(arr("reg_weight") @ out[i] + weights["reg_bias"]) for i in range(n)]
logat_reg = [abs(r - reg[0]) for r in reg]
lm_logits_mask = [float(x) for x in arr("unembedding") @ out[mask_position] + arr("lm_bias")]
lm_pred = int(np.argmax(lm_logits_mask))
logat_lm = [float(arr("unembedding")[lm_pred] @ out[i] + weights["lm_bias"][lm_pred]) for i in range(n)]
norms = [math.sqrt(sum(x * x for x in row)) for row in x0]

golden = {
    "config": {"d_model": D, "d_head": DH, "d_ff": DFF, "vocab_size": V, "max_seq_len": MAXLEN,
               "n_classes": C, "ln_eps": EPS},
    "weights": weights,
    "tokens": tokens,
    "mask_position": mask_position,
    "expected": {
        "x0": x0.tolist(),
        "attention": alpha.tolist(),
        "layer1": out.tolist(),
        "cls_logits": cls_logits,
        "predicted_class": pred,
        "logat_classification": logat_cls,
        "regression_outputs": reg,
        "logat_regression": logat_reg,
        "lm_logits_at_mask": lm_logits_mask,
        "lm_predicted_token": lm_pred,
        "logat_lm_predicted": logat_lm,
        "embedding_norms": norms,
        "normxlogit_classification": [nv * s for nv, s in zip(norms, logat_cls[pred])],
    },
}
print(json.dumps(golden, indent=1))
