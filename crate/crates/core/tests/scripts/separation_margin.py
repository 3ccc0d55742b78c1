"""Monte-Carlo estimate of the clean probe/gallery cosine separation.

Rebuilds the synthetic world with numpy (prototypes on the unit sphere,
gallery = normalize(p + N(0, sg^2)), probe = R normalize(p + N(0, sp^2)),
R a rotation by theta in d/2 random planes) and reports the mean cosine of
same-subject minus different-subject clean pairs over many worlds.
"""
import numpy as np

def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)

def world_margin(rng, n=50, d=64, sg=0.1, sp=0.5, theta=np.radians(30), per=20):
    protos = unit(rng.standard_normal((n, d)))
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    rot = np.eye(d)
    c, s = np.cos(theta), np.sin(theta)
    for k in range(0, d - 1, 2):
        a, b = q[:, k], q[:, k + 1]
        rot += (c - 1) * (np.outer(a, a) + np.outer(b, b)) + s * (np.outer(b, a) - np.outer(a, b))
    gallery = unit(protos[:, None, :] + sg * rng.standard_normal((n, per, d)))
    probe = unit(protos[:, None, :] + sp * rng.standard_normal((n, per, d))) @ rot.T
    g = gallery.reshape(n * per, d)
    p = probe.reshape(n * per, d)
    cos = p @ g.T
    subj = np.repeat(np.arange(n), per)
    same = subj[:, None] == subj[None, :]
    return cos[same].mean() - cos[~same].mean()

rng = np.random.default_rng(20240611)
m = np.array([world_margin(rng) for _ in range(200)])
print(f"margin mean {m.mean():.4f} std {m.std():.4f} min {m.min():.4f}")
