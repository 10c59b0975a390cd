"""Graph attention regression model with hand-written backpropagation.

The heterogeneous network keeps separate projections per node type and
separate attention/message matrices per edge relation. Every target node
attends over all of its in-neighbors (across relations, per head), the
concatenated heads pass through a gelu and a per-type aggregation matrix,
and a residual connection closes the layer. Prediction reads a linear
head at the Document rows.

Everything is dense numpy with fixed reduction orders, so runs repeat
bit-for-bit for a given seed. A plain two-layer graph convolution over
the type-erased graph serves as the homogeneous baseline and trains with
the same loop and loss.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from . import binio
from .issuegraph import (
    ALL_RELATIONS,
    HeteroGraph,
    HomoGraph,
    NodeType,
    Relation,
)

PARAMS_MAGIC = b"SGPM"
PARAMS_VERSION = 1

REGRESSION = "regression"
CLASSIFICATION = "classification"


class ModelError(Exception):
    pass


class ShapeMismatch(ModelError):
    pass


class EmptyMask(ModelError):
    pass


class BadLabel(ModelError):
    pass


class NonFiniteLoss(ModelError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass
class HgtConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 128
    epochs: int = 500
    task: str = REGRESSION
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    input_dim: int = 100
    seed: int = 0
    check_activations: bool = False
    dtype: str = "float32"  # float64 for gradient checking

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self._np_dtype = np.dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def np_dtype(self) -> np.dtype:
        return self._np_dtype


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _glorot(rng: np.random.Generator, shape: tuple[int, ...],
            fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _compose(proj: np.ndarray, w: np.ndarray, heads: int, d: int) -> np.ndarray:
    """Fold a per-head (d x d) matrix into a (hidden x hidden) projection.

    The composed map sends node states straight to the transformed
    per-head space, so edge-level work reduces to gathers and dots.
    """
    v = proj.reshape(proj.shape[0], heads, d)
    return np.einsum("xhd,hdf->xhf", v, w).reshape(proj.shape)


def _edge_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(E,H,d), (E,H,d) -> (E,H) without materializing the product."""
    return np.einsum("ehd,ehd->eh", a, b)


def init_hgt_params(cfg: HgtConfig, n_outputs: int = 1) -> dict[str, np.ndarray]:
    """Fresh parameter tensors, seeded, in a fixed creation order.

    Tensors exist for every node type and relation so that checkpoints do
    not depend on which types a particular graph happens to contain.
    """
    rng = np.random.default_rng(cfg.seed)
    H, d, hid = cfg.heads, cfg.head_dim, cfg.hidden
    dt = cfg.np_dtype
    params: dict[str, np.ndarray] = {}
    for t in NodeType:
        params[f"P|{t.value}"] = _glorot(rng, (cfg.input_dim, hid),
                                         cfg.input_dim, hid).astype(dt)
    for l in range(cfg.layers):
        for t in NodeType:
            params[f"K|{l}|{t.value}"] = _glorot(rng, (hid, hid), hid, hid).astype(dt)
            params[f"Q|{l}|{t.value}"] = _glorot(rng, (hid, hid), hid, hid).astype(dt)
            params[f"M|{l}|{t.value}"] = _glorot(rng, (hid, hid), hid, hid).astype(dt)
            params[f"A|{l}|{t.value}"] = _glorot(rng, (hid, hid), hid, hid).astype(dt)
        for rel in ALL_RELATIONS:
            params[f"ATT|{l}|{rel.key}"] = _glorot(rng, (H, d, d), d, d).astype(dt)
            params[f"MSG|{l}|{rel.key}"] = _glorot(rng, (H, d, d), d, d).astype(dt)
            params[f"MU|{l}|{rel.key}"] = np.ones((), dtype=dt)
    params["OUT_W"] = _glorot(rng, (hid, n_outputs), hid, n_outputs).astype(dt)
    params["OUT_B"] = np.zeros(n_outputs, dtype=dt)
    return params


class _Group(NamedTuple):
    dst_type: NodeType
    n_edges: int
    dst_sorted: np.ndarray       # (E,) target node per edge, ascending
    src_stack: np.ndarray        # (E,) row into the stacked source tables
    rel_ids: np.ndarray          # (E,) ordinal into plan.relations
    seg_starts: np.ndarray
    seg_ids: np.ndarray
    seg_dst: np.ndarray
    sum_by_segment: object       # csr (n_seg, E), for per-edge row vectors
    seg_by_stack: object         # csr (n_seg, stack_total), weighted per use
    stack_by_seg: object         # csr (stack_total, n_seg), its transpose
    stack_by_dst: object         # csr (stack_total, n_dst)
    seg_perm: np.ndarray         # edge -> data slot of seg_by_stack
    stack_perm: np.ndarray       # edge -> data slot of the stack-major pair


class GraphPlan:
    """Static gather/scatter schedule for one merged graph.

    Edges live in one canonical order per target type: relations sorted
    by key, each relation's edges sorted by (source, target) identity,
    the whole group then stably sorted by target. Attention-weighted
    aggregations run as sparse matrix products whose patterns are fixed
    here and whose data is refilled per pass, so every reduction order
    is determined by content rather than storage.
    """

    def __init__(self, counts, relations, rel_offsets, stack_total, groups):
        self.counts = counts
        self.relations: list[Relation] = relations
        self.rel_offsets: dict[Relation, int] = rel_offsets
        self.stack_total = stack_total
        self.groups: list[_Group] = groups

    @classmethod
    def build(cls, h: HeteroGraph, dtype=np.float64) -> "GraphPlan":
        from scipy.sparse import csr_matrix

        counts = {t: len(ids) for t, ids in h.node_ids.items()}
        relations = [rel for rel in sorted(h.edges, key=lambda r: r.key)
                     if h.edges[rel].shape[1]]
        rel_offsets: dict[Relation, int] = {}
        stack_total = 0
        for rel in relations:
            rel_offsets[rel] = stack_total
            stack_total += counts[rel.src]

        groups: list[_Group] = []
        for t in NodeType:
            rels_t = [r for r in relations if r.dst is t]
            if not rels_t:
                continue
            dsts, stacks, rids = [], [], []
            for rel in rels_t:
                arr = h.edges[rel]
                perm = np.lexsort((arr[1], arr[0]))
                dsts.append(arr[1][perm])
                stacks.append(arr[0][perm] + rel_offsets[rel])
                rids.append(np.full(arr.shape[1], relations.index(rel),
                                    dtype=np.int64))
            dst_all = np.concatenate(dsts)
            order = np.argsort(dst_all, kind="stable")
            dst_sorted = dst_all[order]
            src_stack = np.concatenate(stacks)[order]
            rel_ids = np.concatenate(rids)[order]
            e = len(dst_sorted)
            seg_starts = np.concatenate(
                [[0], np.flatnonzero(np.diff(dst_sorted)) + 1]
            )
            seg_ids = np.zeros(e, dtype=np.int64)
            seg_ids[seg_starts[1:]] = 1
            seg_ids = np.cumsum(seg_ids)
            n_seg = len(seg_starts)

            cols = np.arange(e, dtype=np.int64)
            sum_by_segment = csr_matrix(
                (np.ones(e, dtype=dtype), (seg_ids, cols)), shape=(n_seg, e)
            )
            # (segment x stack) pair, both orientations; (seg, stack) pairs
            # are unique, so data slots map 1:1 onto edges
            seg_perm = np.lexsort((src_stack, seg_ids))
            seg_by_stack = csr_matrix(
                (np.empty(e, dtype=dtype), src_stack[seg_perm],
                 np.concatenate([seg_starts, [e]])),
                shape=(n_seg, stack_total),
            )
            stack_perm = np.lexsort((seg_ids, src_stack))
            stack_counts = np.bincount(src_stack, minlength=stack_total)
            stack_indptr = np.concatenate([[0], np.cumsum(stack_counts)])
            stack_by_seg = csr_matrix(
                (np.empty(e, dtype=dtype), seg_ids[stack_perm], stack_indptr),
                shape=(stack_total, n_seg),
            )
            stack_by_dst = csr_matrix(
                (np.empty(e, dtype=dtype), dst_sorted[stack_perm], stack_indptr),
                shape=(stack_total, counts[t]),
            )
            groups.append(
                _Group(t, e, dst_sorted, src_stack, rel_ids, seg_starts,
                       seg_ids, dst_sorted[seg_starts], sum_by_segment,
                       seg_by_stack, stack_by_seg, stack_by_dst,
                       seg_perm, stack_perm)
            )
        return cls(counts, relations, rel_offsets, stack_total, groups)


class _LayerCache(NamedTuple):
    h_in: dict[NodeType, np.ndarray]
    qh: dict[NodeType, np.ndarray]
    tk_stack: np.ndarray  # stacked attention source tables (stack_total, hidden)
    tm_stack: np.ndarray  # stacked message source tables
    per_group: list[tuple]  # (alpha, pre-gelu aggregate, scores)


class HgtNetwork:
    """Heterogeneous attention network bound to one merged graph."""

    def __init__(self, graph: HeteroGraph, cfg: HgtConfig,
                 n_outputs: int = 1,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.n_outputs = n_outputs
        self.plan = GraphPlan.build(graph, cfg.np_dtype)
        self.params = params if params is not None else init_hgt_params(cfg, n_outputs)
        # groups are independent within a layer; numpy releases the GIL
        # for the big gathers and products, so a small pool overlaps them.
        # All cross-group accumulation stays serial in group order. Tiny
        # graphs skip the pool: dispatch would cost more than the work.
        total_edges = sum(g.n_edges for g in self.plan.groups)
        workers = min(len(self.plan.groups) or 1, os.cpu_count() or 1)
        self._pool = (
            ThreadPoolExecutor(max_workers=workers)
            if workers > 1 and total_edges >= 20_000 else None
        )

    def _map_groups(self, fn, jobs):
        if self._pool is None:
            return [fn(*job) for job in jobs]
        # biggest groups first reduces straggling; results return in the
        # original group order so accumulation order never changes
        order = sorted(range(len(jobs)),
                       key=lambda i: -jobs[i][0].n_edges)
        futures = {i: self._pool.submit(fn, *jobs[i]) for i in order}
        return [futures[i].result() for i in range(len(jobs))]

    # -- forward ---------------------------------------------------------

    def _project_inputs(self, features: dict[NodeType, np.ndarray]) -> dict[NodeType, np.ndarray]:
        h = {}
        for t, n in self.plan.counts.items():
            x = features.get(t)
            if x is None or x.shape != (n, self.cfg.input_dim):
                got = None if x is None else x.shape
                raise ShapeMismatch(
                    f"features for {t.value} have shape {got}, "
                    f"expected {(n, self.cfg.input_dim)}"
                )
            h[t] = x.astype(self.cfg.np_dtype, copy=False) @ self.params[f"P|{t.value}"]
        return h

    def _source_tables(self, layer: int, h: dict[NodeType, np.ndarray]):
        """Stacked per-relation source projections with heads folded in."""
        cfg = self.cfg
        p = self.params
        tk = np.empty((self.plan.stack_total, cfg.hidden), dtype=cfg.np_dtype)
        tm = np.empty((self.plan.stack_total, cfg.hidden), dtype=cfg.np_dtype)
        for rel in self.plan.relations:
            s = rel.src
            o = self.plan.rel_offsets[rel]
            n_s = self.plan.counts[s]
            kp = _compose(p[f"K|{layer}|{s.value}"],
                          p[f"ATT|{layer}|{rel.key}"], cfg.heads, cfg.head_dim)
            mp = _compose(p[f"M|{layer}|{s.value}"],
                          p[f"MSG|{layer}|{rel.key}"], cfg.heads, cfg.head_dim)
            tk[o:o + n_s] = h[s] @ kp
            tm[o:o + n_s] = h[s] @ mp
        return tk, tm

    def _mu_vector(self, layer: int) -> np.ndarray:
        return np.array(
            [self.params[f"MU|{layer}|{rel.key}"] for rel in self.plan.relations],
            dtype=self.cfg.np_dtype,
        )

    def _head_major(self, x: np.ndarray) -> np.ndarray:
        """(n, hidden) -> (heads, n, head_dim), contiguous per head."""
        cfg = self.cfg
        return np.ascontiguousarray(
            x.reshape(len(x), cfg.heads, cfg.head_dim).transpose(1, 0, 2)
        )

    def layer_forward(
        self, layer: int, h: dict[NodeType, np.ndarray], with_cache: bool = False
    ) -> tuple[dict[NodeType, np.ndarray], _LayerCache | None]:
        cfg = self.cfg
        H, d = cfg.heads, cfg.head_dim
        sqrt_d = math.sqrt(d)
        p = self.params
        qh = {t: x @ p[f"Q|{layer}|{t.value}"] for t, x in h.items()}
        tk_stack, tm_stack = self._source_tables(layer, h)
        tm_heads = self._head_major(tm_stack)
        mu_vec = self._mu_vector(layer)

        def run_group(group):
            t_dst = group.dst_type
            n_t = self.plan.counts[t_dst]
            e = group.n_edges
            k_e = tk_stack[group.src_stack].reshape(e, H, d)
            q_e = qh[t_dst][group.dst_sorted].reshape(e, H, d)
            scores = _edge_dot(k_e, q_e)
            logits = scores * (mu_vec[group.rel_ids] / sqrt_d)[:, None]
            seg_max = np.maximum.reduceat(logits, group.seg_starts, axis=0)
            ex = np.exp(logits - seg_max[group.seg_ids])
            seg_sum = group.sum_by_segment @ ex
            alpha = ex / seg_sum[group.seg_ids]

            # attention-weighted sum of message rows, one sparse product
            # per head over the static (segment x source) pattern
            n_seg = len(group.seg_dst)
            alpha_slots = alpha[group.seg_perm]
            agg_heads = np.empty((H, n_seg, d), dtype=cfg.np_dtype)
            for hh in range(H):
                group.seg_by_stack.data[:] = alpha_slots[:, hh]
                agg_heads[hh] = group.seg_by_stack @ tm_heads[hh]
            agg = np.zeros((n_t, H * d), dtype=cfg.np_dtype)
            agg[group.seg_dst] = agg_heads.transpose(1, 0, 2).reshape(n_seg, H * d)
            update = _gelu(agg) @ p[f"A|{layer}|{t_dst.value}"]
            return t_dst, update, (alpha, agg, scores)

        h_out = dict(h)
        per_group = []
        results = self._map_groups(run_group, [(g,) for g in self.plan.groups])
        for t_dst, update, cached in results:
            h_out[t_dst] = h[t_dst] + update
            per_group.append(cached)

        cache = _LayerCache(h, qh, tk_stack, tm_stack, per_group) if with_cache else None
        return h_out, cache

    def forward(self, features: dict[NodeType, np.ndarray], with_cache: bool = False):
        h = self._project_inputs(features)
        caches: list[_LayerCache] = []
        for layer in range(self.cfg.layers):
            h, cache = self.layer_forward(layer, h, with_cache)
            if with_cache:
                caches.append(cache)
            if self.cfg.check_activations:
                for t, x in h.items():
                    if not np.isfinite(x).all():
                        raise ModelError(
                            f"non-finite activation in layer {layer} at {t.value}"
                        )
        docs = h[NodeType.DOCUMENT]
        pred = docs @ self.params["OUT_W"] + self.params["OUT_B"]
        if self.cfg.task == REGRESSION:
            pred = pred[:, 0]
        if with_cache:
            return pred, (features, caches, docs)
        return pred

    # -- backward --------------------------------------------------------

    def backward(self, cache, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
        features, caches, docs = cache
        cfg = self.cfg
        H, d = cfg.heads, cfg.head_dim
        sqrt_d = math.sqrt(d)
        p = self.params
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}

        gp = grad_pred.reshape(len(docs), -1).astype(cfg.np_dtype, copy=False)
        grads["OUT_W"] += docs.T @ gp
        grads["OUT_B"] += gp.sum(axis=0)
        gh = {t: np.zeros((n, cfg.hidden), dtype=cfg.np_dtype)
              for t, n in self.plan.counts.items()}
        gh[NodeType.DOCUMENT] += gp @ p["OUT_W"].T

        for layer in reversed(range(cfg.layers)):
            lc = caches[layer]
            gh_in = {t: g.copy() for t, g in gh.items()}  # residual path
            gqh = {t: np.zeros_like(a) for t, a in lc.qh.items()}
            gtk_stack = np.zeros_like(lc.tk_stack)
            gtm_stack = np.zeros_like(lc.tm_stack)
            tk_heads = self._head_major(lc.tk_stack)
            mu_vec = self._mu_vector(layer)
            gmu_vec = np.zeros(len(self.plan.relations))

            def run_group(group, alpha, z, scores):
                t_dst = group.dst_type
                e = group.n_edges
                n_seg = len(group.seg_dst)
                g_upd = gh[t_dst]
                gz_act = _gelu(z)
                g_a = gz_act.T @ g_upd
                gz = (g_upd @ p[f"A|{layer}|{t_dst.value}"].T) * _gelu_grad(z)

                gz_e = gz[group.dst_sorted].reshape(e, H, d)
                msgs_e = lc.tm_stack[group.src_stack].reshape(e, H, d)
                galpha = _edge_dot(msgs_e, gz_e)

                seg_dot = group.sum_by_segment @ (alpha * galpha)
                glog = alpha * (galpha - seg_dot[group.seg_ids])
                g_mu = np.bincount(
                    group.rel_ids, weights=(glog * scores).sum(axis=1),
                    minlength=len(self.plan.relations),
                ) / sqrt_d
                gs = glog * (mu_vec[group.rel_ids] / sqrt_d)[:, None]

                gz_seg_heads = self._head_major(gz[group.seg_dst])
                qh_heads = self._head_major(lc.qh[t_dst])
                alpha_stack = alpha[group.stack_perm]
                gs_stack = gs[group.stack_perm]
                gs_seg = gs[group.seg_perm]
                gtm_heads = np.empty((H, self.plan.stack_total, d),
                                     dtype=cfg.np_dtype)
                gtk_heads = np.empty_like(gtm_heads)
                gq_heads = np.empty((H, n_seg, d), dtype=cfg.np_dtype)
                for hh in range(H):
                    group.stack_by_seg.data[:] = alpha_stack[:, hh]
                    gtm_heads[hh] = group.stack_by_seg @ gz_seg_heads[hh]
                    group.stack_by_dst.data[:] = gs_stack[:, hh]
                    gtk_heads[hh] = group.stack_by_dst @ qh_heads[hh]
                    group.seg_by_stack.data[:] = gs_seg[:, hh]
                    gq_heads[hh] = group.seg_by_stack @ tk_heads[hh]
                return (
                    t_dst, g_a, g_mu,
                    gtm_heads.transpose(1, 0, 2).reshape(-1, H * d),
                    gtk_heads.transpose(1, 0, 2).reshape(-1, H * d),
                    group.seg_dst,
                    gq_heads.transpose(1, 0, 2).reshape(n_seg, H * d),
                )

            jobs = [(g,) + tup for g, tup in zip(self.plan.groups, lc.per_group)]
            for t_dst, g_a, g_mu, g_tm, g_tk, seg_dst, g_q in self._map_groups(
                    run_group, jobs):
                grads[f"A|{layer}|{t_dst.value}"] += g_a
                gmu_vec += g_mu
                gtm_stack += g_tm
                gtk_stack += g_tk
                gqh[t_dst][seg_dst] += g_q

            for i, rel in enumerate(self.plan.relations):
                grads[f"MU|{layer}|{rel.key}"] += cfg.np_dtype.type(gmu_vec[i])

            # unfold the composed source tables into K/ATT and M/MSG grads
            for rel in self.plan.relations:
                s = rel.src
                o = self.plan.rel_offsets[rel]
                n_s = self.plan.counts[s]
                h_in = lc.h_in[s]
                for tag, wtag, stack in (("K", "ATT", gtk_stack),
                                         ("M", "MSG", gtm_stack)):
                    proj = p[f"{tag}|{layer}|{s.value}"]
                    w = p[f"{wtag}|{layer}|{rel.key}"]
                    flat = stack[o:o + n_s]
                    gcomposed = (h_in.T @ flat).reshape(cfg.hidden, H, d)
                    proj_v = proj.reshape(cfg.hidden, H, d)
                    grads[f"{tag}|{layer}|{s.value}"] += np.einsum(
                        "xhf,hdf->xhd", gcomposed, w
                    ).reshape(cfg.hidden, cfg.hidden)
                    grads[f"{wtag}|{layer}|{rel.key}"] += np.einsum(
                        "xhd,xhf->hdf", proj_v, gcomposed
                    )
                    gh_in[s] += flat @ _compose(proj, w, H, d).T

            for t in lc.qh:
                flat = gqh[t]
                grads[f"Q|{layer}|{t.value}"] += lc.h_in[t].T @ flat
                gh_in[t] += flat @ p[f"Q|{layer}|{t.value}"].T
            gh = gh_in

        for t, g in gh.items():
            grads[f"P|{t.value}"] += features[t].astype(cfg.np_dtype, copy=False).T @ g
        return grads


class GcnNetwork:
    """Two-layer symmetric-normalized graph convolution baseline."""

    def __init__(self, homo: HomoGraph, cfg: HgtConfig,
                 n_outputs: int = 1,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.n_outputs = n_outputs
        self.doc_indices = homo.doc_indices
        n = homo.n_nodes
        self.n_nodes = n

        deg = np.ones(n)  # self-loops
        np.add.at(deg, homo.edges[0], 1.0)
        np.add.at(deg, homo.edges[1], 1.0)
        loops = np.arange(n, dtype=np.int64)
        src = np.concatenate([homo.edges[0], homo.edges[1], loops])
        dst = np.concatenate([homo.edges[1], homo.edges[0], loops])
        w = 1.0 / np.sqrt(deg[src] * deg[dst])
        order = np.argsort(dst, kind="stable")
        self._src = src[order]
        self._w = w[order][:, None].astype(cfg.np_dtype)
        dst_sorted = dst[order]
        self._seg_starts = np.concatenate(
            [[0], np.flatnonzero(np.diff(dst_sorted)) + 1]
        )
        self._seg_dst = dst_sorted[self._seg_starts]
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.cfg.seed)
        hid = self.cfg.hidden
        dt = self.cfg.np_dtype
        return {
            "W1": _glorot(rng, (self.cfg.input_dim, hid),
                          self.cfg.input_dim, hid).astype(dt),
            "W2": _glorot(rng, (hid, hid), hid, hid).astype(dt),
            "OUT_W": _glorot(rng, (hid, self.n_outputs),
                             hid, self.n_outputs).astype(dt),
            "OUT_B": np.zeros(self.n_outputs, dtype=dt),
        }

    def _prop(self, x: np.ndarray) -> np.ndarray:
        gathered = self._w * x[self._src]
        out = np.zeros_like(x)
        out[self._seg_dst] = np.add.reduceat(gathered, self._seg_starts, axis=0)
        return out

    def forward(self, features: np.ndarray, with_cache: bool = False):
        if features.shape != (self.n_nodes, self.cfg.input_dim):
            raise ShapeMismatch(
                f"features {features.shape}, expected "
                f"{(self.n_nodes, self.cfg.input_dim)}"
            )
        features = features.astype(self.cfg.np_dtype, copy=False)
        p = self.params
        z1 = self._prop(features @ p["W1"])
        h1 = np.maximum(z1, 0.0)
        z2 = self._prop(h1 @ p["W2"])
        h2 = np.maximum(z2, 0.0)
        if self.cfg.check_activations:
            for layer, act in ((1, h1), (2, h2)):
                if not np.isfinite(act).all():
                    raise ModelError(f"non-finite activation in layer {layer}")
        docs = h2[self.doc_indices]
        pred = docs @ p["OUT_W"] + p["OUT_B"]
        if self.cfg.task == REGRESSION:
            pred = pred[:, 0]
        if with_cache:
            return pred, (features, z1, h1, z2, h2, docs)
        return pred

    def backward(self, cache, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
        features, z1, h1, z2, h2, docs = cache
        p = self.params
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        gp = grad_pred.reshape(len(docs), -1)
        grads["OUT_W"] += docs.T @ gp
        grads["OUT_B"] += gp.sum(axis=0)
        gh2 = np.zeros_like(h2)
        gh2[self.doc_indices] += gp @ p["OUT_W"].T
        gz2 = gh2 * (z2 > 0)
        gxw2 = self._prop(gz2)  # symmetric propagation is its own transpose
        grads["W2"] += h1.T @ gxw2
        gh1 = gxw2 @ p["W2"].T
        gz1 = gh1 * (z1 > 0)
        gxw1 = self._prop(gz1)
        grads["W1"] += features.T @ gxw1
        return grads


# -- losses and labels ----------------------------------------------------


def loss_l1(pred: np.ndarray, target: np.ndarray,
            mask_idx: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over masked rows, with its subgradient."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    if len(mask_idx) == 0:
        raise EmptyMask("loss needs a non-empty mask")
    diff = pred[mask_idx] - target[mask_idx]
    grad = np.zeros_like(pred)
    grad[mask_idx] = np.sign(diff) / len(mask_idx)
    return float(np.abs(diff).mean()), grad


def loss_ce(logits: np.ndarray, label_idx: np.ndarray,
            mask_idx: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over masked rows, with its gradient."""
    if logits.ndim != 2 or len(logits) != len(label_idx):
        raise ShapeMismatch(f"logits {logits.shape} vs labels {label_idx.shape}")
    if len(mask_idx) == 0:
        raise EmptyMask("loss needs a non-empty mask")
    labs = label_idx[mask_idx]
    if labs.min() < 0 or labs.max() >= logits.shape[1]:
        raise BadLabel(f"class index outside [0, {logits.shape[1]})")
    rows = logits[mask_idx]
    shifted = rows - rows.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    picked = probs[np.arange(len(labs)), labs]
    loss = float(-np.log(picked).mean())
    grow = probs.copy()
    grow[np.arange(len(labs)), labs] -= 1.0
    grad = np.zeros_like(logits)
    grad[mask_idx] = grow / len(mask_idx)
    return loss, grad


@dataclass
class ClassMap:
    """Story-point values observed in training, sorted, as class targets."""

    values: np.ndarray

    def __post_init__(self):
        if len(self.values) < 2:
            raise BadLabel("classification needs at least two distinct labels")

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "ClassMap":
        return cls(np.unique(np.asarray(labels, dtype=np.float64)))

    @property
    def n_classes(self) -> int:
        return len(self.values)

    def exact_index(self, labels: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.values, labels)
        idx = np.clip(idx, 0, len(self.values) - 1)
        if not np.array_equal(self.values[idx], labels):
            raise BadLabel("label not among training classes")
        return idx.astype(np.int64)

    def nearest_index(self, labels: np.ndarray) -> np.ndarray:
        # ties break toward the smaller class value
        dist = np.abs(self.values[None, :] - np.asarray(labels)[:, None])
        return dist.argmin(axis=1).astype(np.int64)

    def value_of(self, idx: np.ndarray) -> np.ndarray:
        return self.values[idx]


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainTrace:
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    valid_maes: list[float | None] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: float, valid_mae: float | None,
               seconds: float) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.valid_maes.append(valid_mae)
        self.seconds.append(seconds)

    def __len__(self) -> int:
        return len(self.epochs)

    def loss_lines(self) -> list[str]:
        """Stable text form of the loss curve (timing excluded)."""
        return [
            f"{e},{loss!r},{'' if vm is None else repr(vm)}"
            for e, loss, vm in zip(self.epochs, self.losses, self.valid_maes)
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,valid_mae,seconds\n")
            for e, loss, vm, sec in zip(self.epochs, self.losses,
                                        self.valid_maes, self.seconds):
                vm_s = "" if vm is None else repr(vm)
                fh.write(f"{e},{loss!r},{vm_s},{sec:.6f}\n")


@dataclass
class TrainResult:
    trace: TrainTrace
    best_valid_params: dict[str, np.ndarray] | None = None
    best_valid_mae: float | None = None
    best_valid_epoch: int | None = None


def estimates_from_output(output: np.ndarray, idx: np.ndarray, task: str,
                          class_map: ClassMap | None) -> np.ndarray:
    if task == REGRESSION:
        return output[idx]
    return class_map.value_of(np.argmax(output[idx], axis=1))


def train(network, features, labels: np.ndarray, split: np.ndarray,
          class_map: ClassMap | None = None) -> TrainResult:
    """Full-graph gradient descent for exactly ``cfg.epochs`` steps.

    The loss only ever sees Train documents; Valid documents, when
    present, are scored each epoch from the same forward pass and the
    best-valid parameters are kept aside.
    """
    cfg = network.cfg
    train_idx = np.flatnonzero(split == 0)
    valid_idx = np.flatnonzero(split == 1)
    if len(train_idx) == 0:
        raise EmptyMask("no training documents")
    # the loss mask must never touch a held-out document
    assert not np.isin(train_idx, np.flatnonzero(split != 0)).any()
    if cfg.task == CLASSIFICATION:
        if class_map is None:
            class_map = ClassMap.from_labels(labels[train_idx])
        label_idx = np.full(len(labels), -1, dtype=np.int64)
        label_idx[train_idx] = class_map.exact_index(labels[train_idx])

    adam = Adam(network.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    result = TrainResult(TrainTrace())
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        output, cache = network.forward(features, with_cache=True)
        if cfg.task == REGRESSION:
            loss, grad = loss_l1(output, labels, train_idx)
        else:
            loss, grad = loss_ce(output, label_idx, train_idx)
        if not np.isfinite(loss):
            raise NonFiniteLoss(epoch)
        grads = network.backward(cache, grad)
        adam.step(network.params, grads)

        valid_mae = None
        if len(valid_idx):
            est = estimates_from_output(output, valid_idx, cfg.task, class_map)
            valid_mae = float(np.abs(est - labels[valid_idx]).mean())
            if result.best_valid_mae is None or valid_mae < result.best_valid_mae:
                result.best_valid_mae = valid_mae
                result.best_valid_epoch = epoch
                result.best_valid_params = {
                    k: v.copy() for k, v in network.params.items()
                }
        result.trace.append(epoch, loss, valid_mae, time.perf_counter() - t0)
    return result


def predict(network, features, mask_idx: np.ndarray, task: str = REGRESSION,
            class_map: ClassMap | None = None) -> np.ndarray:
    """Story-point estimates at the given Document rows.

    Regression returns the raw head output (no rounding or clamping);
    classification returns the value of the argmax class.
    """
    output = network.forward(features)
    return estimates_from_output(output, mask_idx, task, class_map)


# -- checkpointing ---------------------------------------------------------


def save_params(path: str | Path, params: dict[str, np.ndarray], cfg: HgtConfig,
                n_outputs: int, kind: str = "hgt",
                class_values: np.ndarray | None = None) -> None:
    meta = {
        "kind": kind,
        "n_outputs": n_outputs,
        "config": {
            "layers": cfg.layers, "heads": cfg.heads, "hidden": cfg.hidden,
            "epochs": cfg.epochs, "task": cfg.task,
            "learning_rate": cfg.learning_rate, "beta1": cfg.beta1,
            "beta2": cfg.beta2, "eps": cfg.eps, "input_dim": cfg.input_dim,
            "seed": cfg.seed, "dtype": cfg.dtype,
        },
    }
    arrays = dict(params)
    if class_values is not None:
        arrays["CLASS_VALUES"] = class_values
    binio.write_container(path, PARAMS_MAGIC, PARAMS_VERSION, meta, arrays)


def load_params(path: str | Path):
    meta, arrays = binio.read_container(path, PARAMS_MAGIC, PARAMS_VERSION)
    cfg = HgtConfig(**meta["config"])
    class_values = arrays.pop("CLASS_VALUES", None)
    return meta["kind"], meta["n_outputs"], cfg, arrays, class_values
