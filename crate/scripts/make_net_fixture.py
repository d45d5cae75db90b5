"""Writes a small network checkpoint and its forward scores computed with numpy."""
import json
import numpy as np

rng = np.random.default_rng(424242)
vocab, dim, hidden = 6, 4, 5
emb = rng.uniform(-1, 1, size=(vocab - 1, dim))
w1 = rng.uniform(-1, 1, size=(hidden, dim))
b1 = rng.uniform(-0.5, 0.5, size=hidden)
w2 = rng.uniform(-1, 1, size=(2, hidden))
b2 = rng.uniform(-0.5, 0.5, size=2)

params = np.concatenate([emb.ravel(), w1.ravel(), b1, w2.ravel(), b2])
net = {
    "layers": [
        {"kind": "embedding_mean", "vocab": vocab, "dim": dim},
        {"kind": "dense", "inputs": dim, "outputs": hidden, "activation": "tanh"},
        {"kind": "dense", "inputs": hidden, "outputs": 2, "activation": "linear"},
    ],
    "params": [float(p) for p in params],
}

tokens = [3, 0, 1, 5, 3]
full = np.vstack([np.zeros(dim), emb])
mean = full[tokens].sum(axis=0) / len(tokens)
h = np.tanh(w1 @ mean + b1)
scores = w2 @ h + b2

out = "crates/core/fixtures/"
with open(out + "tiny_net.json", "w") as f:
    json.dump(net, f, indent=1)
with open(out + "tiny_net_expected.json", "w") as f:
    json.dump({"tokens": tokens, "scores": [float(s) for s in scores]}, f, indent=1)
print(scores)
