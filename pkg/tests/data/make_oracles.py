"""Regenerate oracles.npz with an independent reference implementation.

Needs torch, which the package itself does not use:

    python tests/data/make_oracles.py

Inputs come from a fixed numpy seed and are stored next to the reference
outputs, so the tests never import torch.
"""

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)
rng = np.random.default_rng(20240611)
out: dict[str, np.ndarray] = {}


def t(a, grad=False):
    return torch.tensor(a, dtype=torch.float64, requires_grad=grad)


def save(prefix, **arrays):
    for k, v in arrays.items():
        out[f"{prefix}.{k}"] = v.detach().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)


# conv2d 3x3, pad 1
x = rng.uniform(-2, 2, (2, 3, 5, 5))
w = rng.normal(size=(4, 3, 3, 3))
b = rng.normal(size=4)
gy = rng.normal(size=(2, 4, 5, 5))
tx, tw, tb = t(x, True), t(w, True), t(b, True)
y = F.conv2d(tx, tw, tb, padding=1)
(y * t(gy)).sum().backward()
save("conv", x=x, w=w, b=b, gy=gy, y=y, gx=tx.grad, gw=tw.grad, gb=tb.grad)

# 2x2 max pool
x = rng.uniform(-2, 2, (2, 3, 6, 4))
gy = rng.normal(size=(2, 3, 3, 2))
tx = t(x, True)
y = F.max_pool2d(tx, 2)
(y * t(gy)).sum().backward()
save("pool", x=x, gy=gy, y=y, gx=tx.grad)

# batch norm, train mode, with running statistics
x = rng.uniform(-2, 2, (3, 4, 5, 5))
gamma = rng.uniform(0.5, 1.5, 4)
beta = rng.normal(size=4)
gy = rng.normal(size=x.shape)
bn = torch.nn.BatchNorm2d(4, eps=1e-5, momentum=0.1)
with torch.no_grad():
    bn.weight.copy_(t(gamma))
    bn.bias.copy_(t(beta))
tx = t(x, True)
y = bn(tx)
(y * t(gy)).sum().backward()
save("bn", x=x, gamma=gamma, beta=beta, gy=gy, y=y, gx=tx.grad, ggamma=bn.weight.grad,
     gbeta=bn.bias.grad, running_mean=bn.running_mean, running_var=bn.running_var)
bn.eval()
x2 = rng.uniform(-2, 2, (2, 4, 5, 5))
save("bn", x_eval=x2, y_eval=bn(t(x2)))

# causal dilated conv1d: left pad (k-1)*dilation, weight (out, in, k)
x = rng.uniform(-2, 2, (2, 11, 5))  # (batch, steps, features)
w = rng.normal(size=(3, 5, 3))
b = rng.normal(size=3)
gy = rng.normal(size=(2, 11, 3))
tx, tw, tb = t(x, True), t(w, True), t(b, True)
pad = (3 - 1) * 2
y = F.conv1d(F.pad(tx.transpose(1, 2), (pad, 0)), tw, tb, dilation=2).transpose(1, 2)
(y * t(gy)).sum().backward()
save("causal", x=x, w=w, b=b, gy=gy, y=y, gx=tx.grad, gw=tw.grad, gb=tb.grad)

# weight-normalised linear: row i = g_i v_i / |v_i|
x = rng.uniform(-2, 2, (4, 6))
v = rng.normal(size=(3, 6))
g = rng.uniform(0.5, 2.0, 3)
b = rng.normal(size=3)
gy = rng.normal(size=(4, 3))
tx, tv, tg, tb = t(x, True), t(v, True), t(g, True), t(b, True)
weight = tg[:, None] * tv / tv.norm(dim=1, keepdim=True)
y = tx @ weight.T + tb
(y * t(gy)).sum().backward()
save("wn", x=x, v=v, g=g, b=b, gy=gy, y=y, gx=tx.grad, gv=tv.grad, gg=tg.grad, gb=tb.grad)

# softmax cross-entropy, mean over rows
z = rng.normal(size=(4, 5)) * 3
labels = np.array([0, 3, 1, 4])
tz = t(z, True)
loss = F.cross_entropy(tz, torch.tensor(labels))
loss.backward()
save("ce", z=z, labels=labels, loss=loss, gz=tz.grad)

# two-layer GRU and LSTM
for kind, cls in (("gru", torch.nn.GRU), ("lstm", torch.nn.LSTM)):
    net = cls(4, 3, num_layers=2, batch_first=True)
    x = rng.uniform(-2, 2, (2, 5, 4))
    gy = rng.normal(size=(2, 5, 3))
    params = {}
    with torch.no_grad():
        for name, p in net.named_parameters():
            val = rng.uniform(-0.6, 0.6, tuple(p.shape))
            p.copy_(t(val))
            params[name] = val
    tx = t(x, True)
    y, _ = net(tx)
    (y * t(gy)).sum().backward()
    save(kind, x=x, gy=gy, y=y, gx=tx.grad, **params,
         **{f"grad_{n}": p.grad for n, p in net.named_parameters()})

# Adam, three steps on a fixed gradient sequence
p0 = rng.normal(size=5)
grads = rng.normal(size=(3, 5))
tp = t(p0, True)
opt = torch.optim.Adam([tp], lr=0.001, betas=(0.9, 0.999), eps=1e-8)
for gr in grads:
    opt.zero_grad()
    tp.grad = t(gr)
    opt.step()
save("adam", p0=p0, grads=grads, p3=tp)

np.savez(Path(__file__).with_name("oracles.npz"), **out)
print(f"wrote {len(out)} arrays")
