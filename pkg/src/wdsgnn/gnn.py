"""Local learnable flow estimator: a bias-free message-passing network.

Node features are (true demand, fed-back demand, reservoir mask); edge
features are (fed-back flow estimate, fed-back physics flow) per directed
edge. The network predicts a correction to the previous flow estimate on each
link's defined direction and mirrors it onto the reverse edge, so the output
is antisymmetric by construction.

Checkpoint format (text, UTF-8)::

    wdsgnn-checkpoint 1
    key=value                  (metadata lines, sorted by key)
    ...
    matrix <name> <rows> <cols>
    <rows lines of cols space-separated %.17g floats>
    ...
    end

Matrices appear in :meth:`SurrogateModel.param_names` order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import NetworkModel
from .physics import graph_index

NODE_FEATURES = 3
EDGE_FEATURES = 2
CHECKPOINT_MAGIC = "wdsgnn-checkpoint 1"


class CheckpointError(ValueError):
    pass


@dataclass
class Features:
    """Per-sample batched inputs of one f1 application."""

    d1: np.ndarray  # (B, N) true demands, zero at reservoirs
    d2: Tensor | np.ndarray  # (B, N) fed-back demand estimate
    d3: np.ndarray  # (B, N) reservoir mask
    q1: Tensor | np.ndarray  # (B, E) fed-back flow estimate
    q2: Tensor | np.ndarray  # (B, E) fed-back physics flow

    @classmethod
    def initial(cls, net: NetworkModel, demands: np.ndarray) -> "Features":
        demands = np.atleast_2d(demands)
        B = demands.shape[0]
        d1 = np.where(net.reservoir_mask, 0.0, demands)
        zeros_e = np.zeros((B, net.n_edges))
        return cls(d1, np.zeros_like(d1), np.broadcast_to(net.reservoir_mask.astype(float), d1.shape).copy(),
                   zeros_e, zeros_e.copy())


@dataclass
class SurrogateModel:
    latent: int = 128
    layers: int = 5
    params: dict[str, Tensor] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def param_names(self) -> list[str]:
        names = ["alpha", "beta"]
        for i in range(self.layers):
            names += [f"gamma{i}", f"eta{i}"]
        return names + ["lambda", "phi"]

    def shapes(self) -> dict[str, tuple[int, int]]:
        M = self.latent
        out = {"alpha": (NODE_FEATURES, M), "beta": (EDGE_FEATURES, M)}
        for i in range(self.layers):
            out[f"gamma{i}"] = (3 * M, M)
            out[f"eta{i}"] = (M, M)
        out["lambda"] = (3 * M, M)
        out["phi"] = (2 * M, 1)
        return out

    @classmethod
    def initialize(cls, latent: int = 128, layers: int = 5, seed: int = 0, **meta) -> "SurrogateModel":
        """Uniform weights in +-1/sqrt(fan_in), drawn in parameter order."""
        if latent < 1 or layers < 0:
            raise ValueError("latent must be >= 1 and layers >= 0")
        model = cls(latent, layers, meta={k: str(v) for k, v in meta.items()})
        rng = np.random.default_rng(seed)
        for name, (rows, cols) in model.shapes().items():
            bound = 1.0 / np.sqrt(rows)
            model.params[name] = Tensor(rng.uniform(-bound, bound, (rows, cols)), requires_grad=True, name=name)
        return model

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_names()]

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def copy(self) -> "SurrogateModel":
        params = {n: Tensor(p.value.copy(), requires_grad=True, name=n) for n, p in self.params.items()}
        return SurrogateModel(self.latent, self.layers, params, dict(self.meta))

    def set_values(self, values: dict[str, np.ndarray]):
        for n, v in values.items():
            self.params[n].value = np.array(v, dtype=float)

    # -- forward -------------------------------------------------------------

    def forward(self, net: NetworkModel, feats: Features) -> tuple[Tensor, Tensor]:
        """One f1 application: (q_hat per directed edge, d_hat per node), each batched."""
        gi = graph_index(net)
        M, L = self.latent, net.n_links
        p = self.params
        d1 = np.asarray(feats.d1, dtype=float)
        if d1.ndim != 2 or d1.shape[1] != net.n_nodes:
            raise ad.ShapeError(f"node features must be (B, {net.n_nodes}), got {d1.shape}")
        B = d1.shape[0]
        for nm, arr in (("q1", feats.q1), ("q2", feats.q2)):
            if tuple(arr.shape) != (B, net.n_edges):
                raise ad.ShapeError(f"edge feature {nm} must be ({B}, {net.n_edges}), got {tuple(arr.shape)}")

        # internal layout is (node or edge, batch, latent) so that gathers and
        # segment reductions run over the contiguous leading axis
        def col(x):  # (B, n) -> (n, B, 1)
            return ad.reshape(ad.transpose(x, (1, 0)), (-1, B, 1))

        # Every map is linear and bias-free, so node states are carried as a
        # factor pair (A, W) with g = A @ W, and W is folded into the next map
        # before touching the large arrays. This is the same function as
        # :meth:`forward_reference`, computed with fewer big matrix products.
        a_node = ad.concat([col(d1), col(feats.d2), col(feats.d3)], axis=-1)  # (N, B, 3)
        w_node = p["alpha"]
        a_edge = ad.concat([col(feats.q1), col(feats.q2)], axis=-1)  # (E, B, 2)
        w_edge = p["beta"]
        for i in range(self.layers):
            gamma = p[f"gamma{i}"]
            proj = a_node @ (w_node @ ad.concat([gamma[0:M], gamma[M:2 * M]], axis=1))
            ez = a_edge @ (w_edge @ gamma[2 * M:] if w_edge is not None else gamma[2 * M:])
            pre = (ad.gather(proj[..., 0:M], gi.edge_u_seg)
                   + ad.gather(proj[..., M:], gi.edge_v) + ez)
            m = ad.relu(pre)
            a_node, w_node = ad.segment_max(m, gi.edge_v, fill=0.0), p[f"eta{i}"]
            a_edge, w_edge = m, None

        lam, phi = p["lambda"], p["phi"]
        lu, lv, lz = lam[0:M], lam[M:2 * M], lam[2 * M:]
        p_in, p_out = phi[0:M], phi[M:]
        # column 0 is read at the link's end node, column 1 at its start node
        head_node = ad.concat([lu @ p_in + lv @ p_out, lv @ p_in + lu @ p_out], axis=1)
        pn = a_node @ (w_node @ head_node)  # (N, B, 2)
        head_edge = ad.concat([lz @ p_in, lz @ p_out], axis=1)
        pe = a_edge @ (w_edge @ head_edge if w_edge is not None else head_edge)  # (E, B, 2)
        corr = (ad.gather(pn[..., 0], gi.link_to_seg) + ad.gather(pn[..., 1], gi.link_from_seg)
                + pe[0:L, :, 0] + pe[L:, :, 1])  # (L, B)
        return self._outputs(net, feats, corr, B)

    def _outputs(self, net: NetworkModel, feats: Features, corr: Tensor, B: int) -> tuple[Tensor, Tensor]:
        gi = graph_index(net)
        L = net.n_links
        prev = ad.getitem(ad._tensor(feats.q1), (slice(None), slice(0, L)))
        flow = prev + ad.transpose(corr, (1, 0))
        q_hat = ad.concat([flow, -flow], axis=1)
        d_hat = -ad.segment_sum(q_hat, gi.edge_v, axis=1)
        return q_hat, d_hat

    def forward_reference(self, net: NetworkModel, feats: Features) -> tuple[Tensor, Tensor]:
        """Literal map-by-map evaluation of :meth:`forward` (slower; used as a test oracle)."""
        gi = graph_index(net)
        L = net.n_links
        p = self.params
        d1 = np.asarray(feats.d1, dtype=float)
        B = d1.shape[0]

        def col(x):
            return ad.reshape(ad.transpose(x, (1, 0)), (-1, B, 1))

        g = ad.concat([col(d1), col(feats.d2), col(feats.d3)], axis=-1) @ p["alpha"]
        z = ad.concat([col(feats.q1), col(feats.q2)], axis=-1) @ p["beta"]
        for i in range(self.layers):
            cat = ad.concat([ad.gather(g, gi.edge_u), ad.gather(g, gi.edge_v.ids), z], axis=-1)
            m = ad.relu(cat @ p[f"gamma{i}"])
            g = ad.segment_max(m, gi.edge_v, fill=0.0) @ p[f"eta{i}"]
            z = m
        zbar = ad.concat([ad.gather(g, gi.edge_u), ad.gather(g, gi.edge_v.ids), z], axis=-1) @ p["lambda"]
        corr = ad.concat([zbar[0:L], zbar[L:]], axis=-1) @ p["phi"]  # (L, B, 1)
        return self._outputs(net, feats, ad.reshape(corr, (L, B)), B)

    __call__ = forward

    # -- checkpoints -----------------------------------------------------------

    def save(self, path: str | os.PathLike, **meta):
        allmeta = dict(self.meta)
        allmeta.update({k: str(v) for k, v in meta.items()})
        allmeta["latent"] = str(self.latent)
        allmeta["layers"] = str(self.layers)
        lines = [CHECKPOINT_MAGIC]
        for k in sorted(allmeta):
            v = allmeta[k]
            if "\n" in k or "=" in k or "\n" in v:
                raise CheckpointError(f"metadata entry {k!r} cannot be stored")
            lines.append(f"{k}={v}")
        for name in self.param_names():
            w = self.params[name].value
            lines.append(f"matrix {name} {w.shape[0]} {w.shape[1]}")
            lines.extend(" ".join(f"{x:.17g}" for x in row) for row in w)
        lines.append("end")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SurrogateModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or lines[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        meta: dict[str, str] = {}
        i = 1
        while i < len(lines) and not lines[i].startswith("matrix ") and lines[i] != "end":
            k, sep, v = lines[i].partition("=")
            if not sep:
                raise CheckpointError(f"{path}:{i + 1}: expected key=value")
            meta[k] = v
            i += 1
        try:
            model = cls(int(meta.pop("latent")), int(meta.pop("layers")), meta=meta)
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing {exc.args[0]}") from None
        shapes = model.shapes()
        while i < len(lines) and lines[i] != "end":
            parts = lines[i].split()
            if len(parts) != 4 or parts[0] != "matrix":
                raise CheckpointError(f"{path}:{i + 1}: expected matrix header")
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            if shapes.get(name) != (rows, cols):
                raise CheckpointError(f"{path}:{i + 1}: unexpected matrix {name} {rows}x{cols}")
            block = lines[i + 1:i + 1 + rows]
            try:
                w = np.array([[float(t) for t in row.split()] for row in block], dtype=float)
            except ValueError:
                raise CheckpointError(f"{path}:{i + 2}: bad number in matrix {name}") from None
            if w.shape != (rows, cols):
                raise CheckpointError(f"{path}: matrix {name} is truncated")
            model.params[name] = Tensor(w, requires_grad=True, name=name)
            i += 1 + rows
        missing = [n for n in model.param_names() if n not in model.params]
        if missing:
            raise CheckpointError(f"{path}: missing matrices {missing}")
        return model
