"""Write the fixed-weights forward fixture.

Usage: python3 scripts/golden_forward.py OUT_DIR

Produces OUT_DIR/model.ckpt (a checkpoint holding hand-chosen weights for the
8x8 miniature model with three routing iterations), OUT_DIR/input.txt (a
batch of three images) and OUT_DIR/golden.txt (capsule lengths, predicted
classes and reconstructions), all computed with plain loops below.
"""

import struct
import sys
from pathlib import Path

import numpy as np

CONFIG = """seed = 0
model.mode = sacn
model.in_channels = 1
model.height = 8
model.width = 8
model.num_classes = 2
model.feature_channels = 8
model.feature_kernel = 5
model.primary_types = 2
model.primary_dim = 4
model.primary_kernel = 2
model.primary_stride = 2
model.class_dim = 4
model.routing_iters = 3
model.decoder_hidden1 = 16
model.decoder_hidden2 = 16
model.init_variance = 0.15
attention.softmax_axis = i
attention.spectral_norm = true
attention.power_iters = 1
loss.m_plus = 0.9
loss.m_minus = 0.1
loss.lambda = 0.5
loss.xi = 0.0005
loss.recon_selection = longest
train.precision = f64
train.optimizer = adam
train.batch_size = 4
train.lr = 0.001
train.beta1 = 0.9
train.beta2 = 0.999
train.eps = 0.00000001
train.epochs = 30
train.max_steps = 0
train.early_stop_patience = 0
train.metrics_every = 10
data.kind = synthetic-simple
data.n = 40
data.dir =
data.train_images =
data.train_labels =
data.test_images =
data.test_labels =
data.train_limit = 0
data.val_limit = 0
data.test_limit = 0
"""

C, R, T, D, K, J, DO = 8, 1, 2, 4, 2, 2, 4
H = W = 8
HF = H - 5 + 1
HP = (HF - K) // 2 + 1
NCAPS = T * HP * HP


def conv(x, w, b, stride):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for y in range(oh):
            for xx in range(ow):
                acc = 0.0 if b is None else b[o]
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[o, c, i, j] * x[c, y * stride + i, xx * stride + j]
                out[o, y, xx] = acc
    return out


def squash(s):
    n2 = sum(e * e for e in s)
    n = np.sqrt(n2)
    if n == 0.0:
        return np.zeros_like(s)
    return s * (n / (1.0 + n2))


def forward(p, img):
    x = np.maximum(conv(img, p["feature.weight"], p["feature.bias"], 1), 0.0)
    n = HF * HF
    xf = x.reshape(C, n)
    wf = p["attention.w_f"].reshape(R, C) / p["sigma"][0]
    wg = p["attention.w_g"].reshape(R, C) / p["sigma"][1]
    wh = p["attention.w_h"].reshape(C, C) / p["sigma"][2]
    f, g, h = wf @ xf, wg @ xf, wh @ xf
    eta = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            eta[i, j] = sum(f[r, i] * g[r, j] for r in range(R))
    beta = np.zeros((n, n))
    for j in range(n):
        col = np.exp(eta[:, j] - eta[:, j].max())
        beta[:, j] = col / col.sum()
    o = np.zeros((C, n))
    for c in range(C):
        for j in range(n):
            o[c, j] = sum(h[c, i] * beta[i, j] for i in range(n))
    y = (p["attention.alpha"][0] * o + xf).reshape(C, HF, HF)

    pc = conv(y, p["primary.weight"], p["primary.bias"], 2)
    u = np.zeros((NCAPS, D))
    for t in range(T):
        for s in range(HP * HP):
            vec = np.array([pc[t * D + d, s // HP, s % HP] for d in range(D)])
            u[t * HP * HP + s] = squash(vec)

    wt = p["capsule.transform"]
    uhat = np.zeros((NCAPS, J, DO))
    for i in range(NCAPS):
        for j in range(J):
            uhat[i, j] = wt[i, j] @ u[i]
    b = np.zeros((NCAPS, J))
    for it in range(3):
        c = np.exp(b - b.max(axis=1, keepdims=True))
        c = c / c.sum(axis=1, keepdims=True)
        s = np.zeros((J, DO))
        for j in range(J):
            for i in range(NCAPS):
                s[j] += c[i, j] * uhat[i, j]
        v = np.array([squash(s[j]) for j in range(J)])
        if it < 2:
            for i in range(NCAPS):
                for j in range(J):
                    b[i, j] += uhat[i, j] @ v[j]
    lengths = np.array([np.sqrt(sum(e * e for e in v[j])) for j in range(J)])
    k = 0
    for j in range(1, J):
        if lengths[j] > lengths[k]:
            k = j
    masked = np.zeros(J * DO)
    masked[k * DO:(k + 1) * DO] = v[k]
    a = masked
    for layer in (1, 2, 3):
        a = a @ p[f"decoder.fc{layer}.weight"] + p[f"decoder.fc{layer}.bias"]
        a = np.maximum(a, 0.0) if layer < 3 else 1.0 / (1.0 + np.exp(-a))
    return lengths, k, a


def record(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    out = struct.pack("<I", len(name)) + name.encode()
    out += struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", d) for d in arr.shape)
    return out + arr.astype("<f8").tobytes()


def main():
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240611)
    shapes = [
        ("feature.weight", (C, 1, 5, 5), 0.3),
        ("feature.bias", (C,), 0.1),
        ("attention.w_f", (R, C, 1, 1), 0.5),
        ("attention.w_g", (R, C, 1, 1), 0.5),
        ("attention.w_h", (C, C, 1, 1), 0.5),
        ("primary.weight", (T * D, C, K, K), 0.3),
        ("primary.bias", (T * D,), 0.1),
        ("capsule.transform", (NCAPS, J, DO, D), 0.6),
        ("decoder.fc1.weight", (J * DO, 16), 0.4),
        ("decoder.fc1.bias", (16,), 0.1),
        ("decoder.fc2.weight", (16, 16), 0.4),
        ("decoder.fc2.bias", (16,), 0.1),
        ("decoder.fc3.weight", (16, H * W), 0.4),
        ("decoder.fc3.bias", (H * W,), 0.1),
    ]
    p = {name: rng.normal(0.0, sd, shape) for name, shape, sd in shapes}
    p["attention.alpha"] = np.array([0.4])
    us, sig = [], []
    for name in ("attention.w_f", "attention.w_g", "attention.w_h"):
        m = p[name].reshape(p[name].shape[0], -1)
        left, sv, _ = np.linalg.svd(m)
        us.append(left[:, 0])
        sig.append(sv[0])
    p["sigma"] = sig

    order = [
        "feature.weight", "feature.bias",
        "attention.w_f", "attention.w_g", "attention.w_h", "attention.alpha",
        "primary.weight", "primary.bias", "capsule.transform",
        "decoder.fc1.weight", "decoder.fc1.bias", "decoder.fc2.weight",
        "decoder.fc2.bias", "decoder.fc3.weight", "decoder.fc3.bias",
    ]
    blob = b"SACN" + struct.pack("<I", 1) + struct.pack("<I", len(CONFIG)) + CONFIG.encode()
    for name in order:
        blob += record(name, p[name])
    for tag, u in zip("fgh", us):
        blob += record(f"attention.spectral.{tag}.u", u)
    blob += record("attention.spectral.sigma", sig)
    blob += record("attention.spectral.degenerate", [0.0, 0.0, 0.0])
    (out / "model.ckpt").write_bytes(blob)

    images = rng.uniform(0.0, 1.0, (3, 1, H, W))
    with open(out / "input.txt", "w") as f:
        for img in images:
            f.write(" ".join(repr(float(v)) for v in img.ravel()) + "\n")
    with open(out / "golden.txt", "w") as f:
        for img in images:
            lengths, k, recon = forward(p, img)
            f.write("lengths " + " ".join(repr(float(v)) for v in lengths) + "\n")
            f.write(f"class {k}\n")
            f.write("recon " + " ".join(repr(float(v)) for v in recon) + "\n")


if __name__ == "__main__":
    main()
