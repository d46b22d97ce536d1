"""Q-networks over (static, dynamic) state encodings, with hand-derived gradients.

Three architectures:

``dense``
    one MLP over ``[static, dynamic]`` with a linear ``|J|``-wide output.
``dueling``
    ``Q = u + v``; ``u`` is a scalar from an MLP on the static features only,
    ``v`` the ``|J|``-wide output of an MLP on ``[static, dynamic]``.
``mda``
    multiplicative dueling, ``Q = u * v`` with the same two blocks.

All parameters live in one flat float64 vector ``theta``; layers are views
into it, so an optimizer step is a single vector update.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .features import PcaModel

ARCHS = ("dense", "dueling", "mda")
ARCH_ALIASES = {"dense": "dense", "dueling": "dueling", "duelingadd": "dueling",
                "mda": "mda", "duelingmul": "mda"}

DENSE_HIDDEN = (64, 64)
JOINT_HIDDEN = (64, 64)
STATIC_HIDDEN = (32, 32)


class NonFiniteError(FloatingPointError):
    pass


def canonical_arch(name: str) -> str:
    try:
        return ARCH_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {ARCHS}") from None


def _block_shapes(sizes):
    return [((sizes[i + 1], sizes[i]), (sizes[i + 1],)) for i in range(len(sizes) - 1)]


class QNetwork:
    def __init__(self, arch: str, n_static: int, n_dynamic: int, n_actions: int,
                 theta: np.ndarray | None = None, seed: int = 0,
                 joint_hidden=None, static_hidden=None):
        self.arch = canonical_arch(arch)
        self.n_static = int(n_static)
        self.n_dynamic = int(n_dynamic)
        self.n_actions = int(n_actions)
        n_in = self.n_static + self.n_dynamic
        if self.arch == "dense":
            self.joint_hidden = tuple(joint_hidden or DENSE_HIDDEN)
            self.static_hidden = ()
        else:
            self.joint_hidden = tuple(joint_hidden or JOINT_HIDDEN)
            self.static_hidden = tuple(static_hidden or STATIC_HIDDEN)
        self.blocks = {"joint": _block_shapes((n_in,) + self.joint_hidden + (self.n_actions,))}
        if self.arch != "dense":
            self.blocks["static"] = _block_shapes((self.n_static,) + self.static_hidden + (1,))
        self.index = {}
        offset = 0
        for name, layers in self.blocks.items():
            for li, (ws, bs) in enumerate(layers):
                for tag, shape in (("W", ws), ("b", bs)):
                    size = int(np.prod(shape))
                    self.index[(name, li, tag)] = (offset, shape)
                    offset += size
        self.n_params = offset
        if theta is None:
            self.theta = self._init_theta(seed)
        else:
            theta = np.array(theta, dtype=np.float64)
            if theta.shape != (self.n_params,):
                raise ValueError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
            self.theta = theta

    # -- parameter access -------------------------------------------------
    def view(self, vec: np.ndarray, block: str, layer: int, tag: str) -> np.ndarray:
        off, shape = self.index[(block, layer, tag)]
        return vec[off:off + int(np.prod(shape))].reshape(shape)

    def _init_theta(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.n_params)
        for name, layers in self.blocks.items():
            for li, (ws, _) in enumerate(layers):
                bound = np.sqrt(6.0 / ws[1]) if li < len(layers) - 1 else np.sqrt(3.0 / ws[1])
                self.view(theta, name, li, "W")[...] = rng.uniform(-bound, bound, ws)
        if self.arch == "mda":
            last = len(self.blocks["static"]) - 1
            # a zero-initialised multiplicative gate would block all gradients
            self.view(theta, "static", last, "b")[...] = 1.0
        return theta

    def copy(self) -> "QNetwork":
        return QNetwork(self.arch, self.n_static, self.n_dynamic, self.n_actions,
                        theta=self.theta.copy(), joint_hidden=self.joint_hidden,
                        static_hidden=self.static_hidden or None)

    def shape_table(self) -> dict:
        return {"arch": self.arch, "n_static": self.n_static, "n_dynamic": self.n_dynamic,
                "n_actions": self.n_actions, "joint_hidden": list(self.joint_hidden),
                "static_hidden": list(self.static_hidden), "n_params": self.n_params}

    # -- forward / backward ----------------------------------------------------
    def _mlp(self, block: str, h: np.ndarray, theta: np.ndarray):
        acts = [h]
        pre = []
        layers = self.blocks[block]
        for li in range(len(layers)):
            z = h @ self.view(theta, block, li, "W").T + self.view(theta, block, li, "b")
            pre.append(z)
            h = np.maximum(z, 0.0) if li < len(layers) - 1 else z
            acts.append(h)
        return h, (acts, pre)

    def _mlp_backward(self, block, cache, d_out, theta, grad):
        acts, pre = cache
        dz = d_out
        for li in range(len(self.blocks[block]) - 1, -1, -1):
            self.view(grad, block, li, "W")[...] += dz.T @ acts[li]
            self.view(grad, block, li, "b")[...] += dz.sum(axis=0)
            if li:
                dz = (dz @ self.view(theta, block, li, "W")) * (pre[li - 1] > 0)

    def _inputs(self, static, dynamic):
        static = np.atleast_2d(np.asarray(static, dtype=float))
        dynamic = np.atleast_2d(np.asarray(dynamic, dtype=float))
        if static.shape[1] != self.n_static or dynamic.shape[1] != self.n_dynamic:
            raise ValueError(
                f"input widths ({static.shape[1]}, {dynamic.shape[1]}) do not match "
                f"network ({self.n_static}, {self.n_dynamic})")
        if static.shape[0] == 1 and dynamic.shape[0] > 1:
            static = np.repeat(static, dynamic.shape[0], axis=0)
        return static, dynamic

    def heads(self, static, dynamic, theta=None):
        """Return ``(Q, u, v, caches)`` for a batch; ``u`` is None for dense."""
        theta = self.theta if theta is None else theta
        static, dynamic = self._inputs(static, dynamic)
        v, jcache = self._mlp("joint", np.hstack([static, dynamic]), theta)
        if self.arch == "dense":
            return v, None, v, (jcache, None)
        u, scache = self._mlp("static", static, theta)
        q = u + v if self.arch == "dueling" else u * v
        return q, u, v, (jcache, scache)

    def forward(self, static, dynamic, theta=None) -> np.ndarray:
        """Q-values, shape ``(batch, |J|)`` (or ``(|J|,)`` for a single state)."""
        single = np.ndim(dynamic) == 1
        q = self.heads(static, dynamic, theta)[0]
        return q[0] if single else q

    def loss_and_grad(self, static, dynamic, actions, targets, weights, theta=None):
        """Weighted squared error on the taken actions and its gradient over theta.

        ``loss = mean_i weights_i * (targets_i - Q(s_i, a_i))**2``
        """
        theta = self.theta if theta is None else theta
        actions = np.asarray(actions, dtype=int)
        targets = np.asarray(targets, dtype=float)
        weights = np.asarray(weights, dtype=float)
        q, u, v, (jcache, scache) = self.heads(static, dynamic, theta)
        bsz = q.shape[0]
        rows = np.arange(bsz)
        err = targets - q[rows, actions]
        loss = float(np.mean(weights * err ** 2))
        dq = np.zeros_like(q)
        dq[rows, actions] = -2.0 * weights * err / bsz
        grad = np.zeros_like(theta)
        if self.arch == "dense":
            self._mlp_backward("joint", jcache, dq, theta, grad)
        elif self.arch == "dueling":
            self._mlp_backward("joint", jcache, dq, theta, grad)
            self._mlp_backward("static", scache, dq.sum(axis=1, keepdims=True), theta, grad)
        else:
            self._mlp_backward("joint", jcache, dq * u, theta, grad)
            self._mlp_backward("static", scache, (dq * v).sum(axis=1, keepdims=True), theta, grad)
        return loss, grad


def forward(net: QNetwork, enc) -> np.ndarray:
    return net.forward(enc.static, enc.dynamic)


def select_action(q: np.ndarray, mask) -> int:
    """Argmin of ``q`` over entries where ``mask`` is true; ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no admissible action: mask is all false")
    return int(np.argmin(np.where(mask, q, np.inf)))


def weighted_loss(net: QNetwork, batch, theta=None):
    """``batch`` holds ``(encoding, action, target, v_root)`` tuples; weights are ``1/v_root``."""
    static = np.stack([e.static for e, *_ in batch])
    dynamic = np.stack([e.dynamic for e, *_ in batch])
    actions = [a for _, a, _, _ in batch]
    targets = [t for _, _, t, _ in batch]
    weights = [1.0 / r for *_, r in batch]
    return net.loss_and_grad(static, dynamic, actions, targets, weights, theta)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, net: QNetwork, grad: np.ndarray) -> QNetwork:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient")
        if self.m is None:
            self.m = np.zeros_like(net.theta)
            self.v = np.zeros_like(net.theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        net.theta = net.theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return net


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"FMSTSQN\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    net: QNetwork
    pca: PcaModel
    config: dict


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(net: QNetwork, pca: PcaModel, config: dict, path) -> None:
    header = {
        "shapes": net.shape_table(),
        "pca": {"k": pca.k, "d": pca.d, "warning": pca.warning},
        "config": config,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = io.BytesIO()
    body.write(struct.pack("<I", len(hbytes)))
    body.write(hbytes)
    body.write(_f64(net.theta))
    body.write(_f64(pca.mean))
    body.write(_f64(pca.components))
    body.write(_f64(pca.scale))
    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (plen,) = struct.unpack_from("<Q", raw, 12)
    payload = raw[20:20 + plen]
    if len(payload) != plen or len(raw) != 20 + plen + 4:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated)")
    (crc,) = struct.unpack_from("<I", raw, 20 + plen)
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (checksum mismatch)")
    (hlen,) = struct.unpack_from("<I", payload, 0)
    header = json.loads(payload[4:4 + hlen].decode())
    pos = 4 + hlen

    def take(count):
        nonlocal pos
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    sh = header["shapes"]
    net = QNetwork(sh["arch"], sh["n_static"], sh["n_dynamic"], sh["n_actions"],
                   theta=np.zeros(sh["n_params"]), joint_hidden=sh["joint_hidden"],
                   static_hidden=sh["static_hidden"] or None)
    net.theta = take(sh["n_params"])
    k, d = header["pca"]["k"], header["pca"]["d"]
    mean = take(d)
    comps = take(k * d).reshape(k, d)
    scale = take(k)
    pca = PcaModel(mean=mean, components=comps, scale=scale, warning=header["pca"]["warning"])
    return Checkpoint(net=net, pca=pca, config=header["config"])


def check_family(ckpt: Checkpoint, instance) -> None:
    """Reject a checkpoint whose action width or PCA input size does not fit ``instance``."""
    if len(instance.J) != ckpt.net.n_actions:
        raise IncompatibleCheckpoint(
            f"checkpoint acts on |J|={ckpt.net.n_actions}, instance {instance.id} has |J|={len(instance.J)}")
    if instance.flatten().shape[0] != ckpt.pca.d:
        raise IncompatibleCheckpoint(
            f"checkpoint PCA expects {ckpt.pca.d} data entries, instance {instance.id} has "
            f"{instance.flatten().shape[0]}")
