"""Graph neural network building blocks on the minimal autodiff core.

The encoder maps a molecular graph to a 2-d latent Gaussian (mu, logvar):
node features are lifted to a hidden width, passed through message-passing
layers (m_ij = msg(h_i, h_j, L_ij), aggregated per destination, node update
from (h_i, m_i)), optionally concatenated across layers (skip connections),
pooled to a graph vector, and read out by a small head.

Everything is float64 and deterministic for a given init seed.  Graphs are
processed in batches: node/edge arrays of all frames are stacked and segment
operations keep per-graph bookkeeping, which is what makes training on 10^5
frames tractable with numpy matmuls.
"""

import hashlib
import json
import struct

import numpy as np

from . import autodiff as ad
from .graphs import GraphSpec, complete_edge_index, pair_distances, rbf_expand

MODEL_MAGIC = b"GSPB"
MODEL_VERSION = 1


def _init_uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 1.0
    return rng.uniform(-bound, bound, size=shape)


_ACTIVATIONS = {"silu": ad.silu, "sigmoid": ad.sigmoid,
                "leaky_relu": ad.leaky_relu}


class MLP:
    """Affine-activation stack; the final layer is linear by default."""

    def __init__(self, widths, rng, activation="silu", final_activation=False):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.final_activation = final_activation
        self.weights = []
        self.biases = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            self.weights.append(ad.parameter(_init_uniform(rng, w_in, (w_in, w_out))))
            self.biases.append(ad.parameter(_init_uniform(rng, w_in, (w_out,))))

    def __call__(self, x):
        act = _ACTIVATIONS[self.activation]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if k < last or self.final_activation:
                h = act(h)
        return h

    def parameters(self, prefix=""):
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{k}"] = w
            out[f"{prefix}b{k}"] = b
        return out

    @property
    def n_params(self):
        return sum(w.values.size + b.values.size
                   for w, b in zip(self.weights, self.biases))


AGGREGATIONS = ("mean", "sum", "attention")


class MessagePassingLayer:
    """One round of message passing, Eqs. (2)-(4) style.

    msg_mlp maps [h_i || h_j || e_ij] -> hidden, messages are aggregated per
    destination node (mean, sum, or attention softmax), and upd_mlp maps
    [h_i || m_i] -> the new node embedding.
    """

    def __init__(self, hidden, edge_width, rng, aggregation="mean"):
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        self.hidden = hidden
        self.edge_width = edge_width
        self.aggregation = aggregation
        self.msg_mlp = MLP([2 * hidden + edge_width, hidden, hidden], rng,
                           final_activation=True)
        self.upd_mlp = MLP([2 * hidden, hidden, hidden], rng,
                           final_activation=True)
        if aggregation == "attention":
            self.att_mlp = MLP([2 * hidden + edge_width, hidden, 1], rng,
                               activation="leaky_relu")
        else:
            self.att_mlp = None
        # re-draw the edge block of the first msg/att layer at its own group
        # fan-in: with constant node features the geometry enters only through
        # these columns, and the shared 1/sqrt(2H+We) bound buries it
        self._edge_rows_init(self.msg_mlp, rng)
        if self.att_mlp is not None:
            self._edge_rows_init(self.att_mlp, rng)

    def _edge_rows_init(self, net, rng):
        w0 = net.weights[0]
        lo = 2 * self.hidden
        w0.values[lo:] = _init_uniform(rng, self.edge_width,
                                       (self.edge_width, w0.values.shape[1]))

    def __call__(self, h, edge_index, edge_feat, n_nodes, return_attention=False,
                 plans=None):
        dst = edge_index[:, 0]
        src = edge_index[:, 1]
        dst_plan = plans[0] if plans else ad.IndexPlan(dst, n_nodes)
        src_plan = plans[1] if plans else None
        if self.aggregation != "sum":
            if dst_plan.any_empty:
                raise ValueError(
                    f"{self.aggregation} aggregation undefined for isolated "
                    f"node {int(np.argmax(dst_plan.empty))}")
        if len(dst):
            pair = ad.concat([ad.gather(h, dst, plan=dst_plan),
                              ad.gather(h, src, plan=src_plan), edge_feat])
            msg = self.msg_mlp(pair)
            attention = None
            if self.aggregation == "mean":
                agg = ad.segment_mean(msg, dst, n_nodes, plan=dst_plan)
            elif self.aggregation == "sum":
                agg = ad.segment_sum(msg, dst, n_nodes, plan=dst_plan)
            else:
                score = ad.reshape(self.att_mlp(pair), (len(dst),))
                alpha = ad.segment_softmax(score, dst, n_nodes, plan=dst_plan)
                attention = alpha
                agg = ad.segment_sum(ad.mul(msg, ad.reshape(alpha, (-1, 1))),
                                     dst, n_nodes, plan=dst_plan)
        else:
            agg = ad.constant(np.zeros((n_nodes, self.hidden)))
            attention = None
        out = self.upd_mlp(ad.concat([h, agg]))
        if return_attention:
            return out, attention
        return out

    def parameters(self, prefix=""):
        out = self.msg_mlp.parameters(prefix + "msg.")
        out.update(self.upd_mlp.parameters(prefix + "upd."))
        if self.att_mlp is not None:
            out.update(self.att_mlp.parameters(prefix + "att."))
        return out

    @property
    def n_params(self):
        n = self.msg_mlp.n_params + self.upd_mlp.n_params
        if self.att_mlp is not None:
            n += self.att_mlp.n_params
        return n


POOLINGS = ("mean", "max", "sum")
LATENT_DIM = 2


class GraphBatch:
    """Stacked graphs sharing one topology, for batched encoder passes."""

    def __init__(self, node_values, edge_index, edge_dist, node2graph, n_graphs):
        self.node_values = node_values      # (B*N, F_n) plain array
        self.edge_index = edge_index        # (B*E, 2) global node ids
        self.edge_dist = edge_dist          # (B*E,) distances
        self.node2graph = node2graph        # (B*N,)
        self.n_graphs = n_graphs
        self._plans = None

    @property
    def n_nodes(self):
        return self.node_values.shape[0]

    @property
    def plans(self):
        """Cached scatter plans (dst, src, graph) for this fixed topology."""
        if self._plans is None:
            self._plans = (ad.IndexPlan(self.edge_index[:, 0], self.n_nodes),
                           ad.IndexPlan(self.edge_index[:, 1], self.n_nodes),
                           ad.IndexPlan(self.node2graph, self.n_graphs))
        return self._plans


def batch_from_frames(frames, spec=None):
    """Stack frames (B, N, 2) into one GraphBatch (complete topology only)."""
    if spec is None:
        spec = GraphSpec()
    if spec.connectivity != "complete":
        raise ValueError("batched encoding supports complete graphs only")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    B, N, _ = frames.shape
    ei = complete_edge_index(N)
    E = len(ei)
    delta = frames[:, ei[:, 0], :] - frames[:, ei[:, 1], :]
    dist = np.sqrt(np.einsum("bek,bek->be", delta, delta)).reshape(B * E)
    offsets = (np.arange(B) * N).repeat(E).reshape(B * E, 1)
    edge_index = np.tile(ei, (B, 1)) + offsets
    node_values = np.ones((B * N, 1))
    node2graph = np.repeat(np.arange(B), N)
    return GraphBatch(node_values, edge_index, dist, node2graph, B)


class EncoderNet:
    """Graph encoder producing the 2-d latent Gaussian parameters."""

    def __init__(self, graph_spec=None, hidden=32, n_layers=2,
                 aggregation="mean", pooling=("mean", "max"), skip=True,
                 seed=0, edge_center=1.5, logvar_init=-6.0, mu_gain=32.0):
        if graph_spec is None:
            graph_spec = GraphSpec()
        pooling = tuple(pooling)
        if not pooling:
            raise ValueError("pooling set must be nonempty")
        for p in pooling:
            if p not in POOLINGS:
                raise ValueError(f"unknown pooling {p!r}")
        if n_layers < 1:
            raise ValueError("need at least one message-passing layer")
        self.graph_spec = graph_spec
        self.hidden = hidden
        self.n_layers = n_layers
        self.aggregation = aggregation
        self.pooling = pooling
        self.skip = skip
        self.seed = seed
        # raw distances hover around the dimer minimum, so centering there
        # keeps the edge features signed and small
        self.edge_center = float(edge_center)
        rng = np.random.default_rng(seed)
        self.embed = MLP([graph_spec.node_width, hidden], rng)
        self.layers = [MessagePassingLayer(hidden, graph_spec.edge_width, rng,
                                           aggregation)
                       for _ in range(n_layers)]
        n_concat = (n_layers + 1) if skip else 1
        self.pooled_width = hidden * n_concat * len(pooling)
        self.head = MLP([self.pooled_width, hidden, 2 * LATENT_DIM], rng)
        # Mean aggregation plus the pooled skip concatenation washes most of
        # the geometric variation out of the head input: at init the latent
        # means of distinct isomers sit ~1e-4 apart.  Start the posterior
        # tight (logvar_init) and scale up the mean columns of the last head
        # layer (mu_gain) so the means are resolvable against the sampling
        # noise before the first label refinement; otherwise the decoder
        # latches onto the majority state and refinement collapses to K=1.
        self.logvar_init = float(logvar_init)
        self.mu_gain = float(mu_gain)
        self.head.weights[-1].values[:, :LATENT_DIM] *= self.mu_gain
        self.head.biases[-1].values[:LATENT_DIM] *= self.mu_gain
        self.head.biases[-1].values[LATENT_DIM:] += self.logvar_init

    # -- forward -----------------------------------------------------------

    def _edge_tensor(self, dist, requires_grad=False):
        """Edge distances -> edge feature Tensor, differentiable in dist."""
        d = ad.parameter(dist) if requires_grad else ad.constant(dist)
        col = ad.reshape(d, (-1, 1))
        if self.graph_spec.edge_scheme == "raw_distance":
            if self.edge_center:
                col = ad.sub(col, self.edge_center)
            return d, col
        spec = self.graph_spec
        centers = np.linspace(spec.rbf_rmin, spec.rbf_rmax, spec.rbf_k)
        w = ((spec.rbf_rmax - spec.rbf_rmin) / (spec.rbf_k - 1)
             if spec.rbf_k > 1 else (spec.rbf_rmax - spec.rbf_rmin))
        diff = ad.sub(col, ad.constant(centers))
        feat = ad.exp(ad.mul(ad.square(diff), -1.0 / (2.0 * w * w)))
        return d, feat

    def forward_batch(self, batch, edge_grad=False, return_attention=False):
        """Returns (mu, logvar) Tensors of shape (B, 2).

        With edge_grad=True the edge-distance leaf Tensor is returned too,
        so callers can pull d(output)/d(distances) out of the tape.
        """
        dist_leaf, edge_feat = self._edge_tensor(batch.edge_dist, edge_grad)
        plans = batch.plans
        h = self.embed(ad.constant(batch.node_values))
        collected = [h]
        attentions = []
        for layer in self.layers:
            if return_attention and layer.aggregation == "attention":
                h, att = layer(h, batch.edge_index, edge_feat, batch.n_nodes,
                               return_attention=True, plans=plans)
                attentions.append(att)
            else:
                h = layer(h, batch.edge_index, edge_feat, batch.n_nodes,
                          plans=plans)
            collected.append(h)
        stack = ad.concat(collected) if self.skip else h
        pooled_parts = []
        for p in self.pooling:
            if p == "mean":
                pooled_parts.append(ad.segment_mean(stack, batch.node2graph,
                                                    batch.n_graphs,
                                                    plan=plans[2]))
            elif p == "sum":
                pooled_parts.append(ad.segment_sum(stack, batch.node2graph,
                                                   batch.n_graphs,
                                                   plan=plans[2]))
            else:
                pooled_parts.append(ad.segment_max(stack, batch.node2graph,
                                                   batch.n_graphs,
                                                   plan=plans[2]))
        pooled = ad.concat(pooled_parts) if len(pooled_parts) > 1 else pooled_parts[0]
        out = self.head(pooled)
        mu = ad.col_slice(out, 0, LATENT_DIM)
        logvar = ad.col_slice(out, LATENT_DIM, 2 * LATENT_DIM)
        extras = {}
        if edge_grad:
            extras["dist_leaf"] = dist_leaf
        if return_attention:
            extras["attentions"] = attentions
        if extras:
            return mu, logvar, extras
        return mu, logvar

    def parameters(self, prefix="encoder."):
        out = self.embed.parameters(prefix + "embed.")
        for k, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}layer{k}."))
        out.update(self.head.parameters(prefix + "head."))
        return out

    @property
    def n_params(self):
        return sum(p.values.size for p in self.parameters().values())

    def arch(self):
        gs = self.graph_spec
        return {"hidden": self.hidden, "n_layers": self.n_layers,
                "aggregation": self.aggregation, "pooling": list(self.pooling),
                "skip": self.skip, "seed": self.seed,
                "edge_center": self.edge_center,
                "logvar_init": self.logvar_init,
                "mu_gain": self.mu_gain,
                "graph_spec": {"connectivity": gs.connectivity,
                               "cutoff": gs.cutoff,
                               "node_scheme": gs.node_scheme,
                               "n_classes": gs.n_classes,
                               "edge_scheme": gs.edge_scheme,
                               "rbf_k": gs.rbf_k, "rbf_rmin": gs.rbf_rmin,
                               "rbf_rmax": gs.rbf_rmax}}

    @classmethod
    def from_arch(cls, arch):
        spec = GraphSpec(**arch["graph_spec"])
        return cls(graph_spec=spec, hidden=arch["hidden"],
                   n_layers=arch["n_layers"], aggregation=arch["aggregation"],
                   pooling=tuple(arch["pooling"]), skip=arch["skip"],
                   seed=arch.get("seed", 0),
                   edge_center=arch.get("edge_center", 1.5),
                   logvar_init=arch.get("logvar_init", -6.0),
                   mu_gain=arch.get("mu_gain", 32.0))


def pool_graph(embeddings, pooling, skip_buffers=None):
    """Reduce node embeddings to one graph vector.

    ``embeddings`` is the final (N, H) layer output; ``skip_buffers`` holds
    earlier layers' embeddings to concatenate first (the skip connection).
    Returns the concatenation of the selected reductions.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("pool_graph needs a nonempty (N, H) embedding matrix")
    pooling = tuple(pooling)
    if not pooling:
        raise ValueError("pooling set must be nonempty")
    parts = list(skip_buffers) if skip_buffers else []
    stack = np.concatenate(parts + [emb], axis=1) if parts else emb
    reduced = []
    for p in pooling:
        if p == "mean":
            reduced.append(stack.mean(axis=0))
        elif p == "max":
            reduced.append(stack.max(axis=0))
        elif p == "sum":
            reduced.append(stack.sum(axis=0))
        else:
            raise ValueError(f"unknown pooling {p!r}")
    return np.concatenate(reduced)


def _batch_from_graph(graph):
    if graph.edge_features.shape[1] != 1:
        raise ValueError("precomputed rbf graphs cannot be re-encoded; "
                         "pass raw positions instead")
    n = graph.node_features.shape[0]
    return GraphBatch(np.asarray(graph.node_features, dtype=np.float64),
                      graph.edge_index,
                      np.ascontiguousarray(graph.edge_features[:, 0]),
                      np.zeros(n, dtype=np.int64), 1)


def encoder_forward(net, frame):
    """Deterministic (mu, logvar) for one frame, as plain arrays.

    ``frame`` may be an (N, 2) position array or a raw-distance MolGraph.
    """
    if hasattr(frame, "edge_features"):
        batch = _batch_from_graph(frame)
    else:
        batch = batch_from_frames(np.asarray(frame)[None])
    mu, logvar = net.forward_batch(batch)
    return mu.values[0].copy(), logvar.values[0].copy()


def evaluate_series(net, frames, batch_size=1024):
    """Encoder mu over many frames -> (F, 2) array."""
    frames = np.asarray(frames, dtype=np.float64)
    out = np.empty((frames.shape[0], LATENT_DIM))
    for lo in range(0, frames.shape[0], batch_size):
        hi = min(lo + batch_size, frames.shape[0])
        mu, _ = net.forward_batch(batch_from_frames(frames[lo:hi]))
        out[lo:hi] = mu.values
    return out


def bias_gradient(net, positions, gvec):
    """sum_k gvec[k] * d(mu_k)/d(positions) via one backward pass.

    The tape runs to the edge distances; the chain to Cartesian coordinates
    uses the analytic d(r_ij)/dx.  Returns an (N, 2) array.
    """
    pos = np.asarray(positions, dtype=np.float64)
    batch = batch_from_frames(pos[None])
    if np.any(batch.edge_dist == 0.0):
        raise ValueError("coincident particles: distance gradient undefined")
    mu, logvar, extras = net.forward_batch(batch, edge_grad=True)
    seedvec = np.zeros((1, LATENT_DIM))
    seedvec[0] = gvec
    scalar = ad.tsum(ad.mul(mu, ad.constant(seedvec)))
    scalar.backward()
    dgrad = extras["dist_leaf"].grad  # (E,)
    ei = batch.edge_index
    delta = pos[ei[:, 0]] - pos[ei[:, 1]]
    unit = delta / batch.edge_dist[:, None]
    out = np.zeros_like(pos)
    np.add.at(out, ei[:, 0], dgrad[:, None] * unit)
    np.add.at(out, ei[:, 1], -dgrad[:, None] * unit)
    return out


def input_gradient(net, positions, component):
    """d(mu_component)/d(positions) as an (N, 2) array."""
    g = np.zeros(LATENT_DIM)
    g[component] = 1.0
    return bias_gradient(net, positions, g)


def attention_matrix(net, positions):
    """Per-layer attention coefficients as dense (N, N) matrices."""
    if net.aggregation != "attention":
        raise ValueError("encoder does not use attention aggregation")
    pos = np.asarray(positions, dtype=np.float64)
    batch = batch_from_frames(pos[None])
    _, _, extras = net.forward_batch(batch, return_attention=True)
    n = pos.shape[0]
    mats = []
    for att in extras["attentions"]:
        m = np.zeros((n, n))
        m[batch.edge_index[:, 0], batch.edge_index[:, 1]] = att.values
        mats.append(m)
    return mats


def export_attention_csv(path, matrix):
    """Dense attention matrix as CSV, rows = destination node."""
    n = matrix.shape[0]
    with open(path, "w") as fh:
        fh.write("dst," + ",".join(f"src{j}" for j in range(n)) + "\n")
        for i in range(n):
            fh.write(f"{i}," + ",".join("%.10g" % v for v in matrix[i]) + "\n")


def _dsilu(x, sig):
    """silu'(x) given the cached sigmoid of x."""
    return sig * (1.0 + x * (1.0 - sig))


class PackedEncoder:
    """Tape-free mirror of an encoder for per-step bias evaluation.

    Biasing dynamics on (z1, z2) needs mu and d(mu)/dx at every force update,
    and the autodiff tape is far too slow for 1e7-step runs.  This packs the
    weights of a raw-distance complete-graph encoder into plain arrays and
    evaluates the forward pass and a hand-written reverse pass with ~60 numpy
    calls on (E, H) blocks.  Results match the tape to roundoff (see tests).

    Supported: mean or sum aggregation, any mean/max/sum pooling tuple, skip
    on or off, any hidden width / layer count.  Attention aggregation and rbf
    edge features fall outside the fast path; callers should catch the
    ValueError and keep the tape.
    """

    def __init__(self, net, n_particles=7):
        gs = net.graph_spec
        if gs.connectivity != "complete":
            raise ValueError("packed evaluation supports complete graphs only")
        if gs.edge_scheme != "raw_distance":
            raise ValueError("packed evaluation supports raw edges only")
        if net.aggregation not in ("mean", "sum"):
            raise ValueError("packed evaluation supports mean/sum aggregation")
        if n_particles < 2:
            raise ValueError("need at least two particles")
        self.n = int(n_particles)
        self.deg = self.n - 1
        ei = complete_edge_index(self.n)       # dst-major: n-1 rows per dst
        self.dst = ei[:, 0].copy()
        self.src = ei[:, 1].copy()
        self.src_order = np.argsort(self.src, kind="stable")
        self.hidden = net.hidden
        self.n_layers = net.n_layers
        self.mean_agg = net.aggregation == "mean"
        self.pooling = net.pooling
        self.skip = net.skip
        self.edge_center = net.edge_center
        # node features are the constant 1, so the embedding is one shared
        # vector and the first msg layer is affine in the edge feature alone
        self.h0 = (net.embed.weights[0].values[0]
                   + net.embed.biases[0].values).copy()
        H = self.hidden
        self.layers = []
        for layer in net.layers:
            w1 = layer.msg_mlp.weights[0].values
            lp = {"w1_dst": w1[:H].copy(), "w1_src": w1[H:2 * H].copy(),
                  "w1_e": w1[2 * H].copy(),
                  "b1": layer.msg_mlp.biases[0].values.copy(),
                  "w2": layer.msg_mlp.weights[1].values.copy(),
                  "b2": layer.msg_mlp.biases[1].values.copy(),
                  "u1_h": layer.upd_mlp.weights[0].values[:H].copy(),
                  "u1_m": layer.upd_mlp.weights[0].values[H:].copy(),
                  "ub1": layer.upd_mlp.biases[0].values.copy(),
                  "u2": layer.upd_mlp.weights[1].values.copy(),
                  "ub2": layer.upd_mlp.biases[1].values.copy()}
            self.layers.append(lp)
        # layer 0 msg preactivation: constant part + edge term
        l0 = self.layers[0]
        self.l0_base = self.h0 @ l0["w1_dst"] + self.h0 @ l0["w1_src"] + l0["b1"]
        self.hw1 = net.head.weights[0].values.copy()
        self.hb1 = net.head.biases[0].values.copy()
        self.hw2 = net.head.weights[1].values.copy()
        self.hb2 = net.head.biases[1].values.copy()

    def _edges(self, pos):
        delta = pos[self.dst] - pos[self.src]
        r = np.sqrt(np.einsum("ek,ek->e", delta, delta))
        if np.any(r == 0.0):
            raise ValueError("coincident particles: distance gradient undefined")
        return delta, r

    def _forward(self, pos, keep=False):
        """Run the network; with keep=True cache everything backward needs."""
        H, N, deg = self.hidden, self.n, self.deg
        delta, r = self._edges(pos)
        e = r - self.edge_center
        h = np.broadcast_to(self.h0, (N, H))
        collected = [h]
        caches = []
        for li, lp in enumerate(self.layers):
            if li == 0:
                a1 = self.l0_base + e[:, None] * lp["w1_e"]
            else:
                a1 = (h[self.dst] @ lp["w1_dst"] + h[self.src] @ lp["w1_src"]
                      + e[:, None] * lp["w1_e"] + lp["b1"])
            sig1 = 1.0 / (1.0 + np.exp(-a1))
            s1 = a1 * sig1
            a2 = s1 @ lp["w2"] + lp["b2"]
            sig2 = 1.0 / (1.0 + np.exp(-a2))
            msg = a2 * sig2
            m = msg.reshape(N, deg, H).sum(axis=1)
            if self.mean_agg:
                m /= deg
            ua1 = h @ lp["u1_h"] + m @ lp["u1_m"] + lp["ub1"]
            usig1 = 1.0 / (1.0 + np.exp(-ua1))
            us1 = ua1 * usig1
            ua2 = us1 @ lp["u2"] + lp["ub2"]
            usig2 = 1.0 / (1.0 + np.exp(-ua2))
            h_new = ua2 * usig2
            if keep:
                caches.append({"h_in": h, "a1": a1, "sig1": sig1, "s1": s1,
                               "a2": a2, "sig2": sig2, "ua1": ua1,
                               "usig1": usig1, "us1": us1, "ua2": ua2,
                               "usig2": usig2})
            h = h_new
            collected.append(h)
        stack = np.concatenate(collected, axis=1) if self.skip else h
        parts = []
        argmaxes = {}
        for pi, p in enumerate(self.pooling):
            if p == "mean":
                parts.append(stack.mean(axis=0))
            elif p == "sum":
                parts.append(stack.sum(axis=0))
            else:
                idx = stack.argmax(axis=0)
                argmaxes[pi] = idx
                parts.append(stack[idx, np.arange(stack.shape[1])])
        pooled = np.concatenate(parts)
        ha1 = pooled @ self.hw1 + self.hb1
        hsig1 = 1.0 / (1.0 + np.exp(-ha1))
        hs1 = ha1 * hsig1
        out = hs1 @ self.hw2 + self.hb2
        if not keep:
            return out[:LATENT_DIM]
        fwd = {"delta": delta, "r": r, "caches": caches, "stack": stack,
               "argmaxes": argmaxes, "ha1": ha1, "hsig1": hsig1}
        return out[:LATENT_DIM], fwd

    def mu(self, positions):
        """Deterministic latent mean, matching encoder_forward."""
        return self._forward(np.asarray(positions, dtype=np.float64))

    def mu_jac(self, positions):
        """(mu, d(mu)/dx) with the Jacobian shaped (2, N, 2)."""
        pos = np.asarray(positions, dtype=np.float64)
        mu, fwd = self._forward(pos, keep=True)
        H, N, deg = self.hidden, self.n, self.deg
        S = self.hidden * (self.n_layers + 1) if self.skip else self.hidden

        g_out = np.eye(LATENT_DIM, self.hw2.shape[1])
        g_hs1 = g_out @ self.hw2.T
        g_ha1 = g_hs1 * _dsilu(fwd["ha1"], fwd["hsig1"])
        g_pooled = g_ha1 @ self.hw1.T

        g_stack = np.zeros((LATENT_DIM, N, S))
        cols = np.arange(S)
        for pi, p in enumerate(self.pooling):
            block = g_pooled[:, pi * S:(pi + 1) * S]
            if p == "mean":
                g_stack += block[:, None, :] / N
            elif p == "sum":
                g_stack += block[:, None, :]
            else:
                idx = fwd["argmaxes"][pi]
                g_stack[np.arange(LATENT_DIM)[:, None], idx[None, :],
                        cols[None, :]] += block

        if self.skip:
            g_skips = [g_stack[:, :, k * H:(k + 1) * H]
                       for k in range(self.n_layers + 1)]
            g_h = g_skips[-1].copy()
        else:
            g_h = g_stack.copy()
        g_r = np.zeros((LATENT_DIM, len(self.dst)))

        for li in range(self.n_layers - 1, -1, -1):
            lp = self.layers[li]
            c = fwd["caches"][li]
            g_ua2 = g_h * _dsilu(c["ua2"], c["usig2"])
            g_us1 = g_ua2 @ lp["u2"].T
            g_ua1 = g_us1 * _dsilu(c["ua1"], c["usig1"])
            g_h_prev = g_ua1 @ lp["u1_h"].T
            g_m = g_ua1 @ lp["u1_m"].T
            if self.mean_agg:
                g_m = g_m / deg
            g_msg = np.repeat(g_m, deg, axis=1)
            g_a2 = g_msg * _dsilu(c["a2"], c["sig2"])
            g_s1 = g_a2 @ lp["w2"].T
            g_a1 = g_s1 * _dsilu(c["a1"], c["sig1"])
            g_r += g_a1 @ lp["w1_e"]
            if li > 0:
                g_dst = g_a1 @ lp["w1_dst"].T
                g_src = g_a1 @ lp["w1_src"].T
                g_h_prev += g_dst.reshape(LATENT_DIM, N, deg, H).sum(axis=2)
                g_h_prev += (g_src[:, self.src_order]
                             .reshape(LATENT_DIM, N, deg, H).sum(axis=2))
            if self.skip and li > 0:
                g_h_prev += g_skips[li]
            g_h = g_h_prev

        unit = fwd["delta"] / fwd["r"][:, None]
        contrib = g_r[:, :, None] * unit[None, :, :]
        jac = contrib.reshape(LATENT_DIM, N, deg, 2).sum(axis=2)
        jac -= (contrib[:, self.src_order]
                .reshape(LATENT_DIM, N, deg, 2).sum(axis=2))
        return mu.copy(), jac


# -- optimizer ---------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1.0e-3, beta1=0.9, beta2=0.999, eps=1.0e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# -- model file --------------------------------------------------------------

def _spec_hash(arch):
    blob = json.dumps(arch, sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def save_params(path, arch, params):
    """Versioned binary model file: header + named f64 parameter blocks."""
    arch_blob = json.dumps(arch, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IQI", MODEL_VERSION, _spec_hash(arch),
                             len(arch_blob)))
        fh.write(arch_blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            values = np.ascontiguousarray(
                params[name].values if isinstance(params[name], ad.Tensor)
                else params[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", values.ndim))
            fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
            fh.write(values.tobytes())


def load_params(path):
    """Read a model file back into (arch, {name: array})."""
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise ValueError("not a model file (bad magic)")
        version, spec_hash, arch_len = struct.unpack("<IQI", fh.read(16))
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        arch = json.loads(fh.read(arch_len).decode())
        if _spec_hash(arch) != spec_hash:
            raise ValueError("architecture hash mismatch: corrupt file")
        (n_blocks,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            params[name] = data.reshape(shape).copy()
    return arch, params


def assign_params(net_params, loaded):
    """Copy loaded arrays into live parameter Tensors, shape-checked."""
    for name, tensor in net_params.items():
        if name not in loaded:
            raise ValueError(f"missing parameter block {name!r}")
        arr = loaded[name]
        if arr.shape != tensor.values.shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{arr.shape} vs {tensor.values.shape}")
        tensor.values[...] = arr
