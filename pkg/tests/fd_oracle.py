"""Central finite-difference oracle for every parameter of the two-block network.

Runs an inference-mode forward pass written independently of ``gtasc.nn``'s
layer classes (window-tensordot convolutions, explicit BN/SE/softmax), batched
over perturbations, recomputing only what a perturbation can change:

* conv weights enter linearly, so a perturbed conv output is the base output
  plus ``h`` times one shifted input channel;
* a perturbation that only touches channel ``c`` before the SE gate leaves the
  other channels' pre-gate maps untouched, and because the gate is positive,
  ``max(a * g) == g * max(a)`` exactly, so their pooled values are the base
  pooled values times the new gate.

A central difference is only a valid oracle when the +h and -h evaluations sit
on the same smooth piece (same ReLU masks and max-pool winners). When they do
not, the step for that entry is shrunk by 10x until they do.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _conv(x, k, b):
    kh, kw = k.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n h w ci kh kw
    return np.tensordot(win, k, axes=([4, 5, 3], [0, 1, 2])) + b


def _matvec(v, w):
    # w may carry a leading per-item axis
    return np.einsum("nc,ncd->nd", v, w) if w.ndim == 3 else v @ w


def _batched(arr, n, idx, delta):
    out = np.repeat(arr[None], n, axis=0)
    out[(np.arange(n),) + idx] += delta
    return out


class FDOracle:
    def __init__(self, state, spec, x, target, alpha=0.25, gamma=2.0, eps=1e-5):
        self.s = {k: np.asarray(v, dtype=np.float64) for k, v in state.items()}
        self.spec = spec
        x = np.asarray(x, dtype=np.float64)
        self.x = (x[..., None] if x.ndim == 2 else x)[None]
        self.target = target
        self.alpha, self.gamma, self.bn_eps = alpha, gamma, eps
        self.nb = spec.n_blocks
        self.base = {}
        self.pat = {}
        y = self.x
        for i in range(1, self.nb + 1):
            self.base[f"block{i}.input"] = y
            y = self._pool(self._block(i, y, record=True), self.pat, f"pool{i}")
        self.base["gap"] = y.mean(axis=(1, 2))
        self.base_loss = self._head(self.base["gap"])[0]

    # -- primitives --------------------------------------------------------
    def _bn(self, h, name, gamma=None, beta=None, ch=slice(None)):
        s = self.s
        g = s[name + ".gamma"][ch] if gamma is None else gamma
        b = s[name + ".beta"][ch] if beta is None else beta
        mu, var = s[name + ".running_mean"][ch], s[name + ".running_var"][ch]
        return g * (h - mu) / np.sqrt(var + self.bn_eps) + b

    def _gate(self, z, p, pats, override=None):
        w = {k: self.s[p + "se." + k] for k in ("w1", "b1", "w2", "b2")}
        w.update(override or {})
        a = _matvec(z, w["w1"]) + w["b1"]
        pats[p + "se_relu"] = a > 0
        e = _matvec(np.maximum(a, 0), w["w2"]) + w["b2"]
        return 1.0 / (1.0 + np.exp(-e))

    def _windows(self, h):
        ph, pw = self.spec.pool
        n, H, W, C = h.shape
        ho, wo = H // ph, W // pw
        win = h[:, :ho * ph, :wo * pw].reshape(n, ho, ph, wo, pw, C)
        return win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, C, ph * pw)

    def _pool(self, h, pats, key):
        win = self._windows(h)
        pats[key] = win.argmax(axis=-1)
        return win.max(axis=-1)

    def _bn_channel(self, name, ch, h, gamma=None, beta=None):
        """BN of (n, H, W) maps where item r lives in channel ch[r]."""
        s = self.s
        g = (s[name + ".gamma"][ch] if gamma is None else gamma)[:, None, None]
        b = (s[name + ".beta"][ch] if beta is None else beta)[:, None, None]
        mu = s[name + ".running_mean"][ch][:, None, None]
        var = s[name + ".running_var"][ch][:, None, None]
        return g * (h - mu) / np.sqrt(var + self.bn_eps) + b

    def _skip(self, i, x):
        p = f"block{i}.shortcut."
        if p + "kernel" in self.s:
            return _conv(x, self.s[p + "kernel"], self.s[p + "bias"])
        return x

    # -- full block (general path) -----------------------------------------
    def _block(self, i, x, conv1=None, bn1=None, pats=None, record=False):
        """Full block forward; ``conv1`` / ``bn1`` inject already-perturbed stage outputs."""
        p = f"block{i}."
        s = self.s
        pats = self.pat if pats is None else pats
        if bn1 is None:
            if conv1 is None:
                conv1 = _conv(x, s[p + "conv1.kernel"], s[p + "conv1.bias"])
            bn1 = self._bn(conv1, p + "bn1")
        pats[p + "relu1"] = bn1 > 0
        r1 = np.maximum(bn1, 0)
        c2 = _conv(r1, s[p + "conv2.kernel"], s[p + "conv2.bias"])
        skip = self._skip(i, x)
        pre = self._bn(c2, p + "bn2") + skip
        pats[p + "relu2"] = pre > 0
        a = np.maximum(pre, 0)
        if record:
            self.base.update({p + "conv1": conv1, p + "relu1": r1, p + "conv2": c2,
                              p + "skip": skip, p + "pre": pre, p + "act": a,
                              p + "z": a.mean(axis=(1, 2)),
                              p + "act_pool": self._windows(a).max(axis=-1)})
        return a * self._gate(a.mean(axis=(1, 2)), p, pats)[:, None, None, :]

    # -- channel-local path ------------------------------------------------
    def _block_channel(self, i, ch, pre_c, pats):
        """Pooled block output when only channel ``ch[r]`` of the pre-ReLU sum changed."""
        p = f"block{i}."
        n = len(ch)
        rows = np.arange(n)
        base_pre = self.base[p + "pre"][0]
        pats[p + "relu2~"] = (pre_c > 0) != (base_pre[..., ch].transpose(2, 0, 1) > 0)
        a_c = np.maximum(pre_c, 0)
        z = np.repeat(self.base[p + "z"], n, axis=0)
        z[rows, ch] = a_c.mean(axis=(1, 2))
        gate = self._gate(z, p, pats)
        return self._regate(i, gate, pats, ch, a_c)

    def _regate(self, i, gate, pats, ch=None, a_c=None):
        p = f"block{i}."
        pooled = self.base[p + "act_pool"] * gate[:, None, None, :]
        if ch is not None:
            rows = np.arange(len(ch))
            win = self._windows((a_c * gate[rows, ch][:, None, None])[..., None])[..., 0, :]
            pooled[rows, :, :, ch] = win.max(axis=-1)
            base_arg = self.pat[f"pool{i}"][0][..., ch].transpose(2, 0, 1)
            pats[f"pool{i}~"] = win.argmax(axis=-1) != base_arg
        return pooled

    # -- downstream --------------------------------------------------------
    def _after(self, i, pooled, pats):
        y = pooled
        for j in range(i + 1, self.nb + 1):
            y = self._pool(self._block(j, y, pats=pats), pats, f"pool{j}")
        return self._head(y.mean(axis=(1, 2)))

    def _head(self, g, weight=None, bias=None):
        w = self.s["dense.weight"] if weight is None else weight
        b = self.s["dense.bias"] if bias is None else bias
        z = _matvec(g, w) + b
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        pt = np.clip(probs[:, self.target], 1e-12, 1.0)
        return -self.alpha * (1.0 - pt) ** self.gamma * np.log(pt)

    def _changed(self, pats, n):
        """Keys ending in '~' already hold difference masks; others are compared to base."""
        changed = np.zeros(n, bool)
        for key, pat in pats.items():
            diff = pat if key.endswith("~") else pat != self.pat[key]
            changed |= diff.reshape(n, -1).any(axis=1)
        return changed

    # -- perturbed losses --------------------------------------------------
    def losses(self, name, flat_idx, delta):
        """Loss for each (flat index, signed step) pair, plus a pattern-changed flag."""
        parts = name.split(".")
        shape = self.s[name].shape
        idx = np.unravel_index(flat_idx, shape)
        n = len(flat_idx)
        rows = np.arange(n)
        pats = {}
        if parts[0] == "dense":
            g = np.repeat(self.base["gap"], n, axis=0)
            kw = {parts[1]: _batched(self.s[name], n, idx, delta)}
            return self._head(g, **kw), np.zeros(n, bool)

        i = int(parts[0][len("block"):])
        p = f"block{i}."
        x = self.base[p + "input"]
        layer, pname = parts[1], parts[2]
        base = self.base

        if layer == "se":
            gate = self._gate(np.repeat(base[p + "z"], n, axis=0), p, pats,
                              override={pname: _batched(self.s[name], n, idx, delta)})
            pooled = self._regate(i, gate, pats)
        elif layer in ("conv1", "bn1"):
            # one channel of conv1/bn1 changes; conv2 sees it through a single input channel
            co = idx[-1] if layer == "conv1" else idx[0]
            c1 = base[p + "conv1"][0][..., co].transpose(2, 0, 1).copy()
            gamma = beta = None
            if layer == "bn1":
                v = self.s[name][co] + delta
                gamma, beta = (v, None) if pname == "gamma" else (None, v)
            elif pname == "bias":
                c1 += delta[:, None, None]
            else:
                dh, dw, ci, _ = idx
                c1 += delta[:, None, None] * self._shifted(x[0], dh, dw, ci, 3)
            b1 = self._bn_channel(p + "bn1", co, c1, gamma, beta)
            r1_base = base[p + "relu1"][0][..., co].transpose(2, 0, 1)
            pats[p + "relu1~"] = (b1 > 0) != (r1_base > 0)
            d = np.maximum(b1, 0) - r1_base
            k2 = self.s[p + "conv2.kernel"]
            H, W = d.shape[1:]
            dp = np.pad(d, ((0, 0), (1, 1), (1, 1)))
            c2 = np.repeat(base[p + "conv2"], n, axis=0)
            for a in range(3):
                for b in range(3):
                    c2 += dp[:, a:a + H, b:b + W, None] * k2[a, b, co, :][:, None, None, :]
            pre = self._bn(c2, p + "bn2") + base[p + "skip"]
            pats[p + "relu2"] = pre > 0
            act = np.maximum(pre, 0)
            y = act * self._gate(act.mean(axis=(1, 2)), p, pats)[:, None, None, :]
            pooled = self._pool(y, pats, f"pool{i}")
        else:
            # conv2 / bn2 / shortcut only move one channel of the pre-ReLU sum
            co = idx[-1] if layer != "bn2" else idx[0]
            c2 = base[p + "conv2"][0][..., co].transpose(2, 0, 1).copy()
            skip = base[p + "skip"][0][..., co].transpose(2, 0, 1).copy()
            gamma = beta = None
            if layer == "conv2":
                if pname == "bias":
                    c2 += delta[:, None, None]
                else:
                    dh, dw, ci, _ = idx
                    c2 += delta[:, None, None] * self._shifted(base[p + "relu1"][0], dh, dw, ci, 3)
            elif layer == "shortcut":
                if pname == "bias":
                    skip += delta[:, None, None]
                else:
                    skip += delta[:, None, None] * x[0][..., idx[2]].transpose(2, 0, 1)
            else:
                v = self.s[name][co] + delta
                gamma, beta = (v, None) if pname == "gamma" else (None, v)
            pre_c = self._bn_channel(p + "bn2", co, c2, gamma, beta) + skip
            pooled = self._block_channel(i, co, pre_c, pats)
        return self._after(i, pooled, pats), self._changed(pats, n)

    @staticmethod
    def _shifted(src, dh, dw, ci, k):
        """(n, H, W) stack of src[..., ci] shifted by kernel offsets (dh, dw), zero-padded."""
        H, W = src.shape[:2]
        sp = np.pad(src, ((k // 2, k // 2), (k // 2, k // 2), (0, 0)))
        return np.stack([sp[a:a + H, b:b + W, c] for a, b, c in zip(dh, dw, ci)])

    def gradient(self, name, h=1e-5, chunk=64, max_shrink=4):
        """Central differences for every entry of parameter ``name``.

        Returns (fd_gradient, number of entries whose step had to be shrunk).
        """
        size = self.s[name].size
        fd = np.empty(size)
        shrunk = 0
        for start in range(0, size, chunk):
            ids = np.arange(start, min(start + chunk, size))
            step = np.full(len(ids), h)
            todo = np.ones(len(ids), bool)
            for attempt in range(max_shrink + 1):
                sel, st = ids[todo], step[todo]
                lp, cp = self.losses(name, sel, st)
                lm, cm = self.losses(name, sel, -st)
                fd[sel] = (lp - lm) / (2 * st)
                bad = cp | cm
                if not bad.any() or attempt == max_shrink:
                    break
                if attempt == 0:
                    shrunk += int(bad.sum())
                nxt = np.zeros(len(ids), bool)
                nxt[np.flatnonzero(todo)[bad]] = True
                todo = nxt
                step[todo] /= 10
        return fd.reshape(self.s[name].shape), shrunk
