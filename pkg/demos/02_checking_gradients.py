"""Hand-written backward passes, checked against central differences.

Run: python demos/02_checking_gradients.py
"""
import numpy as np

from gausstr import autodiff as ad
from gausstr.geometry import Camera
from gausstr.renderer import _rasterize, render_backward

rng = np.random.default_rng(1)

# A small expression through the tape.
x = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
W = ad.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
with ad.Tape() as tape:
    y = ad.tsum(ad.tanh(ad.matmul(x, W)))
print("recorded ops:", tape.ops())
gx, gW = tape.gradient(y, [x, W])


def f(xv):
    return np.tanh(xv @ W.data).sum()


h, num = 1e-6, np.zeros(x.shape)
for idx in np.ndindex(x.shape):
    e = np.zeros(x.shape)
    e[idx] = h
    num[idx] = (f(x.data + e) - f(x.data - e)) / (2 * h)
print(f"tanh(xW): relative error {np.linalg.norm(num - gx) / np.linalg.norm(num):.1e}")

# The splatting rasterizer: four Gaussians on an 8x8 image.
cam = Camera(np.array([[8.0, 0, 4], [0, 8.0, 4], [0, 0, 1]]), np.eye(4), 8, 8)
mu = np.c_[rng.uniform(-0.3, 0.3, (4, 2)), rng.uniform(1.5, 4.0, 4)]
args = [mu, rng.uniform(0.1, 0.4, (4, 3)), rng.normal(size=(4, 4)), rng.uniform(0.2, 0.9, 4), rng.normal(size=(4, 3))]
view, state = _rasterize(*args, cam)
gF = rng.normal(size=view.feat.shape)
grads = render_backward(state, gF, np.zeros_like(view.depth))


def loss(mu3d):
    return np.sum(_rasterize(mu3d, *args[1:], cam)[0].feat * gF)


h, num = 1e-4, np.zeros_like(mu)
for idx in np.ndindex(mu.shape):
    e = np.zeros_like(mu)
    e[idx] = h
    num[idx] = (loss(mu + e) - loss(mu - e)) / (2 * h)
print(f"render d/dmu: relative error {np.linalg.norm(num - grads['mu3d']) / np.linalg.norm(num):.1e}")
