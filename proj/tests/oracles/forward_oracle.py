"""Independent float64 forward pass for the tiny fixed-weight decoder used in
test_model.cpp (ForwardOracle.*). Prints the expected logits as a C++ array.

Model: 1 layer, 1 head, d_model 4, d_mlp 4, vocab 5, LayerNorm (eps 1e-5),
parallel residual, rotary on the first 2 of 4 head dims, base 10000.
Weight entry (i, j) of parameter number p is ((2*i*i + 3*j + 5*p + i*j) % 5) - 2,
except the qkv weight and bias (p = 5, 6), which use ((i + 2*j + p) % 3) - 1;
norm gains are 1 + ((i + p) % 2) and norm biases are ((i + p) % 3) - 1.
"""
import math

import numpy as np

D, V, M = 4, 5, 4
EPS = 1e-5
ROT = 2
BASE = 10000.0
TOKENS = [3, 1, 2]


def mat(p, rows, cols):
    return np.array([[((2 * i * i + 3 * j + 5 * p + i * j) % 5) - 2 for j in range(cols)] for i in range(rows)], dtype=float)


def small(p, rows, cols):
    return np.array([[((i + 2 * j + p) % 3) - 1 for j in range(cols)] for i in range(rows)], dtype=float)


def vec(p, n):
    return mat(p, 1, n)[0]


def gain(p, n):
    return np.array([1 + ((i + p) % 2) for i in range(n)], dtype=float)


def nbias(p, n):
    return np.array([((i + p) % 3) - 1 for i in range(n)], dtype=float)


embed = mat(0, V, D)
g1, b1 = gain(1, D), nbias(2, D)
g2, b2 = gain(3, D), nbias(4, D)
w_qkv, b_qkv = small(5, D, 3 * D), small(6, 1, 3 * D)[0]
w_o, b_o = mat(7, D, D), vec(8, D)
w_up, b_up = mat(9, D, M), vec(10, M)
w_dn, b_dn = mat(11, M, D), vec(12, D)
gf, bf = gain(13, D), nbias(14, D)
w_u = mat(15, D, V)


def layernorm(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + EPS) * g + b


def rope(v, pos):
    out = v.copy()
    half = ROT // 2
    for i in range(half):
        ang = pos * BASE ** (-2.0 * i / ROT)
        a, b = v[i], v[i + half]
        out[i] = a * math.cos(ang) - b * math.sin(ang)
        out[i + half] = a * math.sin(ang) + b * math.cos(ang)
    return out


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


x = np.stack([embed[t] for t in TOKENS])
n = len(TOKENS)
n1 = np.stack([layernorm(x[t], g1, b1) for t in range(n)])
n2 = np.stack([layernorm(x[t], g2, b2) for t in range(n)])
qkv = n1 @ w_qkv + b_qkv
q = np.stack([rope(qkv[t, 0:D], t) for t in range(n)])
k = np.stack([rope(qkv[t, D:2 * D], t) for t in range(n)])
v = qkv[:, 2 * D:]
probs = np.zeros((n, n))
for t in range(n):
    s = np.array([q[t] @ k[j] / math.sqrt(D) for j in range(t + 1)])
    e = np.exp(s - s.max())
    probs[t, : t + 1] = e / e.sum()
attn = probs @ v @ w_o + b_o
hidden = np.vectorize(gelu)(n2 @ w_up + b_up)
mlp = hidden @ w_dn + b_dn
resid = x + attn + mlp
logits = np.stack([layernorm(resid[t], gf, bf) for t in range(n)]) @ w_u

print("// attention probabilities")
for row in probs:
    print("{" + ", ".join(f"{p:.9f}" for p in row) + "},")
print("// logits")
for row in logits:
    print("{" + ", ".join(f"{p:.9f}" for p in row) + "},")
