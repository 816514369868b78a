"""The residual-transformer segmentation network over 9-grid descriptors.

Pipeline: per-grid projections (729->32), fusion of the concatenated
projections (288->144), per-grid lifts forming 9 tokens of width 144,
shared residual feed-forward blocks, transformer encoder layers over the
9 tokens, a dense head reshaped to 9x9x9x8, concatenation of the 2 mm
local cube as a 9th channel, and a two-conv decoder emitting 5x5x5xC
logits.  Ablation variants drop the residual blocks, the encoder, or both.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .sampler import CUBE_SIZE, DESCRIPTOR_DIM, GRID_COUNT, SAMPLES_PER_GRID

VARIANTS = ("full", "residual_only", "transformer_only", "mlp_only")

CHECKPOINT_MAGIC = b"SPSG"
CHECKPOINT_VERSION = 1

HEAD_OUT = 9 * 9 * 9 * 8  # 5832
PRE_DECODER_SHAPE = (9, 9, 9, 8)


class CheckpointError(ValueError):
    pass


class CheckpointBadMagic(CheckpointError):
    pass


class CheckpointVersionMismatch(CheckpointError):
    pass


class CheckpointShapeMismatch(CheckpointError):
    pass


class CheckpointStructureError(CheckpointError):
    pass


class CheckpointTruncated(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    class_count: int = 6
    grid_proj_width: int = 32
    model_width: int = 144
    heads: int = 2
    n_residual_blocks: int = 2
    n_encoder_layers: int = 2
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.model_width % self.heads:
            raise ValueError("model_width must be divisible by heads")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


class ResidualTransformer:
    """Parameter container plus batched forward/backward for one variant."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, nn.Parameter] = {}
        self._init_params(np.random.default_rng(cfg.seed))

    # -- construction -------------------------------------------------------

    def _add(self, name, value):
        p = nn.Parameter(name, value)
        self.params[name] = p
        return p

    def _add_linear(self, name, fan_in, fan_out, rng):
        self._add(f"{name}.W", nn.glorot_uniform(rng, (fan_out, fan_in), fan_in, fan_out, self.dtype))
        self._add(f"{name}.b", np.zeros(fan_out, self.dtype))

    def _add_layer_norm(self, name, width):
        self._add(f"{name}.gamma", np.ones(width, self.dtype))
        self._add(f"{name}.beta", np.zeros(width, self.dtype))

    def _init_params(self, rng):
        cfg = self.cfg
        w, d = cfg.grid_proj_width, cfg.model_width
        for i in range(GRID_COUNT):
            self._add_linear(f"proj{i}", SAMPLES_PER_GRID, w, rng)
        self._add_linear("fusion", GRID_COUNT * w, d, rng)

        if cfg.variant == "mlp_only":
            self._add_linear("mlp", d, GRID_COUNT * d, rng)
        else:
            for i in range(GRID_COUNT):
                self._add_linear(f"lift{i}", w, d, rng)
            if cfg.variant in ("full", "residual_only"):
                for j in range(cfg.n_residual_blocks):
                    self._add_linear(f"res{j}.fc1", d, d, rng)
                    self._add_linear(f"res{j}.fc2", d, d, rng)
                    self._add_layer_norm(f"res{j}.ln", d)
            if cfg.variant in ("full", "transformer_only"):
                for j in range(cfg.n_encoder_layers):
                    for nm in ("q", "k", "v", "o"):
                        self._add_linear(f"enc{j}.attn.{nm}", d, d, rng)
                    self._add_layer_norm(f"enc{j}.ln1", d)
                    self._add_linear(f"enc{j}.ff.fc1", d, d, rng)
                    self._add_linear(f"enc{j}.ff.fc2", d, d, rng)
                    self._add_layer_norm(f"enc{j}.ln2", d)

        self._add_linear("head", GRID_COUNT * d, HEAD_OUT, rng)
        kshape1 = (9, 3, 3, 3, 9)
        self._add("conv1.K", nn.glorot_uniform(rng, kshape1, 27 * 9, 27 * 9, self.dtype))
        self._add("conv1.b", np.zeros(9, self.dtype))
        kshape2 = (cfg.class_count, 3, 3, 3, 9)
        self._add("conv2.K", nn.glorot_uniform(rng, kshape2, 27 * 9, 27 * cfg.class_count, self.dtype))
        self._add("conv2.b", np.zeros(cfg.class_count, self.dtype))

    # -- convenience --------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _w(self, name):
        return self.params[name].value

    # -- forward ------------------------------------------------------------

    def forward_batch(self, descs, local=None):
        logits, _ = self.forward_batch_cached(descs, local)
        return logits

    def forward_batch_cached(self, descs, local=None):
        """descs: (N, 9, 729); local: (N, 9, 9, 9) or derived from block 3.

        Returns (logits (N, 5, 5, 5, C), cache); the cache also records the
        (N, 9, 9, 9, 8) pre-decoder feature under 'pre_decoder'.
        """
        cfg = self.cfg
        descs = np.asarray(descs, self.dtype)
        if descs.ndim != 3 or descs.shape[1:] != (GRID_COUNT, SAMPLES_PER_GRID):
            raise ValueError(f"descriptor batch shape {descs.shape} does not match layout")
        N = descs.shape[0]
        if local is None:
            local = descs[:, 3, :].reshape(N, CUBE_SIZE, CUBE_SIZE, CUBE_SIZE)
        local = np.asarray(local, self.dtype)

        cache = {}
        flat = self._encode(descs, cache)

        # (6) head -> 9x9x9x8
        hout, cache["head"] = nn.linear(flat, self._w("head.W"), self._w("head.b"))
        feat = hout.reshape(N, *PRE_DECODER_SHAPE)
        cache["pre_decoder"] = feat
        # (7) local cube as a 9th channel
        dec_in = np.concatenate([feat, local[..., None]], axis=-1)
        # (8) conv decoder
        c1out, cache["conv1"] = nn.conv3d(dec_in, self._w("conv1.K"), self._w("conv1.b"), stride=1)
        c1act, cache["conv1_relu"] = nn.relu(c1out)
        logits, cache["conv2"] = nn.conv3d(c1act, self._w("conv2.K"), self._w("conv2.b"), stride=2)
        return logits, cache

    def encode_batch(self, descs):
        """Stages (1)-(5) plus flattening; the FusedDecoder consumes this."""
        return self._encode(np.asarray(descs, self.dtype), {})

    def _encode(self, descs, cache):
        cfg = self.cfg
        N = descs.shape[0]
        # (1) per-grid projections
        p = np.empty((N, GRID_COUNT, cfg.grid_proj_width), self.dtype)
        cache["proj"] = []
        for i in range(GRID_COUNT):
            p[:, i], c = nn.linear(descs[:, i], self._w(f"proj{i}.W"), self._w(f"proj{i}.b"))
            cache["proj"].append(c)
        # (2) fusion of the concatenated projections
        f, cache["fusion"] = nn.linear(
            p.reshape(N, -1), self._w("fusion.W"), self._w("fusion.b")
        )

        d = cfg.model_width
        if cfg.variant == "mlp_only":
            flat, cache["mlp"] = nn.linear(f, self._w("mlp.W"), self._w("mlp.b"))
        else:
            # (3) tokens = lift(p_i) + fused global feature
            x = np.empty((N, GRID_COUNT, d), self.dtype)
            cache["lift"] = []
            for i in range(GRID_COUNT):
                li, c = nn.linear(p[:, i], self._w(f"lift{i}.W"), self._w(f"lift{i}.b"))
                x[:, i] = li + f
                cache["lift"].append(c)
            # (4) shared residual feed-forward blocks
            cache["res"] = []
            if cfg.variant in ("full", "residual_only"):
                for j in range(cfg.n_residual_blocks):
                    h, c1 = nn.linear(x, self._w(f"res{j}.fc1.W"), self._w(f"res{j}.fc1.b"))
                    a, cr = nn.relu(h)
                    r, c2 = nn.linear(a, self._w(f"res{j}.fc2.W"), self._w(f"res{j}.fc2.b"))
                    x, cl = nn.layer_norm(
                        x + r, self._w(f"res{j}.ln.gamma"), self._w(f"res{j}.ln.beta")
                    )
                    cache["res"].append((c1, cr, c2, cl))
            # (5) transformer encoder layers over the 9 tokens
            cache["enc"] = []
            if cfg.variant in ("full", "transformer_only"):
                for j in range(cfg.n_encoder_layers):
                    att, ca = nn.multi_head_self_attention(
                        x, cfg.heads,
                        self._w(f"enc{j}.attn.q.W"), self._w(f"enc{j}.attn.q.b"),
                        self._w(f"enc{j}.attn.k.W"), self._w(f"enc{j}.attn.k.b"),
                        self._w(f"enc{j}.attn.v.W"), self._w(f"enc{j}.attn.v.b"),
                        self._w(f"enc{j}.attn.o.W"), self._w(f"enc{j}.attn.o.b"),
                    )
                    x, cl1 = nn.layer_norm(
                        x + att, self._w(f"enc{j}.ln1.gamma"), self._w(f"enc{j}.ln1.beta")
                    )
                    h, c1 = nn.linear(x, self._w(f"enc{j}.ff.fc1.W"), self._w(f"enc{j}.ff.fc1.b"))
                    a, cr = nn.relu(h)
                    r, c2 = nn.linear(a, self._w(f"enc{j}.ff.fc2.W"), self._w(f"enc{j}.ff.fc2.b"))
                    x, cl2 = nn.layer_norm(
                        x + r, self._w(f"enc{j}.ln2.gamma"), self._w(f"enc{j}.ln2.beta")
                    )
                    cache["enc"].append((ca, cl1, c1, cr, c2, cl2))
            flat = x.reshape(N, GRID_COUNT * d)
        return flat

    # -- backward -----------------------------------------------------------

    def backward_batch(self, dlogits, cache):
        """Accumulate parameter gradients; returns grad wrt the descriptors."""
        cfg = self.cfg
        dlogits = np.asarray(dlogits, self.dtype)

        dc1act, dK2, db2 = nn.conv3d_backward(dlogits, cache["conv2"])
        self._acc("conv2.K", dK2)
        self._acc("conv2.b", db2)
        dc1out = nn.relu_backward(dc1act, cache["conv1_relu"])
        ddec_in, dK1, db1 = nn.conv3d_backward(dc1out, cache["conv1"])
        self._acc("conv1.K", dK1)
        self._acc("conv1.b", db1)
        dfeat = ddec_in[..., :8]
        dlocal = ddec_in[..., 8]

        N = dfeat.shape[0]
        dflat, dWh, dbh = nn.linear_backward(dfeat.reshape(N, HEAD_OUT), cache["head"])
        self._acc("head.W", dWh)
        self._acc("head.b", dbh)

        d = cfg.model_width
        if cfg.variant == "mlp_only":
            df, dWm, dbm = nn.linear_backward(dflat, cache["mlp"])
            self._acc("mlp.W", dWm)
            self._acc("mlp.b", dbm)
            dp = np.zeros((N, GRID_COUNT, cfg.grid_proj_width), self.dtype)
        else:
            dx = dflat.reshape(N, GRID_COUNT, d)
            for j in reversed(range(len(cache.get("enc", [])))):
                ca, cl1, c1, cr, c2, cl2 = cache["enc"][j]
                dsum, dg, dbta = nn.layer_norm_backward(dx, cl2)
                self._acc(f"enc{j}.ln2.gamma", dg)
                self._acc(f"enc{j}.ln2.beta", dbta)
                da, dW2, db2_ = nn.linear_backward(dsum, c2)
                self._acc(f"enc{j}.ff.fc2.W", dW2)
                self._acc(f"enc{j}.ff.fc2.b", db2_)
                dh = nn.relu_backward(da, cr)
                dx1, dW1, db1_ = nn.linear_backward(dh, c1)
                self._acc(f"enc{j}.ff.fc1.W", dW1)
                self._acc(f"enc{j}.ff.fc1.b", db1_)
                dx = dsum + dx1
                dsum, dg, dbta = nn.layer_norm_backward(dx, cl1)
                self._acc(f"enc{j}.ln1.gamma", dg)
                self._acc(f"enc{j}.ln1.beta", dbta)
                datt, wgrads = nn.multi_head_self_attention_backward(dsum, ca)
                for nm, g in zip(
                    ("q.W", "q.b", "k.W", "k.b", "v.W", "v.b", "o.W", "o.b"), wgrads
                ):
                    self._acc(f"enc{j}.attn.{nm}", g)
                dx = dsum + datt
            for j in reversed(range(len(cache.get("res", [])))):
                c1, cr, c2, cl = cache["res"][j]
                dsum, dg, dbta = nn.layer_norm_backward(dx, cl)
                self._acc(f"res{j}.ln.gamma", dg)
                self._acc(f"res{j}.ln.beta", dbta)
                da, dW2, db2_ = nn.linear_backward(dsum, c2)
                self._acc(f"res{j}.fc2.W", dW2)
                self._acc(f"res{j}.fc2.b", db2_)
                dh = nn.relu_backward(da, cr)
                dx1, dW1, db1_ = nn.linear_backward(dh, c1)
                self._acc(f"res{j}.fc1.W", dW1)
                self._acc(f"res{j}.fc1.b", db1_)
                dx = dsum + dx1
            dp = np.empty((N, GRID_COUNT, cfg.grid_proj_width), self.dtype)
            df = np.zeros((N, d), self.dtype)
            for i in range(GRID_COUNT):
                dpi, dWl, dbl = nn.linear_backward(dx[:, i], cache["lift"][i])
                self._acc(f"lift{i}.W", dWl)
                self._acc(f"lift{i}.b", dbl)
                dp[:, i] = dpi
                df += dx[:, i]

        dpcat, dWf, dbf = nn.linear_backward(df, cache["fusion"])
        self._acc("fusion.W", dWf)
        self._acc("fusion.b", dbf)
        dp += dpcat.reshape(N, GRID_COUNT, cfg.grid_proj_width)

        ddescs = np.empty((N, GRID_COUNT, SAMPLES_PER_GRID), self.dtype)
        for i in range(GRID_COUNT):
            dxi, dWp, dbp = nn.linear_backward(dp[:, i], cache["proj"][i])
            self._acc(f"proj{i}.W", dWp)
            self._acc(f"proj{i}.b", dbp)
            ddescs[:, i] = dxi
        # the local-grid channel is descriptor block 3 reshaped
        ddescs[:, 3] += dlocal.reshape(N, SAMPLES_PER_GRID)
        return ddescs

    def _acc(self, name, g):
        self.params[name].grad += g

    # -- analysis -----------------------------------------------------------

    def multiply_count_per_query(self) -> int:
        """Analytic MAC count of one forward pass (batch of 1)."""
        cfg = self.cfg
        w, d, T = cfg.grid_proj_width, cfg.model_width, GRID_COUNT
        n = T * SAMPLES_PER_GRID * w          # projections
        n += T * w * d                        # fusion
        if cfg.variant == "mlp_only":
            n += d * T * d                    # 144 -> 1296
        else:
            n += T * w * d                    # lifts
            if cfg.variant in ("full", "residual_only"):
                n += cfg.n_residual_blocks * T * 2 * d * d
            if cfg.variant in ("full", "transformer_only"):
                per = T * 4 * d * d + 2 * T * T * d + T * 2 * d * d
                n += cfg.n_encoder_layers * per
        n += T * d * HEAD_OUT                 # head
        n += 729 * 27 * 9 * 9                 # conv1
        n += 125 * 27 * 9 * cfg.class_count   # conv2
        return n


class FusedDecoder:
    """Inference-only decoder folding conv1 into the head's dense layer.

    conv1 is linear in its input, so conv1(head(x) ++ local) equals a single
    dense map of the encoder output plus a sparse map of the local cube.
    Same arithmetic up to float reassociation; used for whole-volume speed.
    """

    def __init__(self, model: ResidualTransformer):
        from scipy.sparse import csr_matrix

        self.model = model
        K = model._w("conv1.K")          # (9, 3, 3, 3, 9); channel 8 is the local cube
        Wh = model._w("head.W")          # (5832, 1296)

        # conv1 as a sparse matrix over (729 positions x 9 channels) outputs;
        # feature inputs (729 x 8) and the local cube (729 x 1) kept separate.
        pos = np.arange(729)
        d, h, w = pos // 81, (pos // 9) % 9, pos % 9
        ci, co = np.arange(8), np.arange(9)
        fr, fc, fv = [], [], []
        lr, lc, lv = [], [], []
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    sd, sh, sw = d + a - 1, h + b - 1, w + c - 1
                    ok = ((sd >= 0) & (sd < 9) & (sh >= 0) & (sh < 9)
                          & (sw >= 0) & (sw < 9))
                    op, ip = pos[ok], (sd[ok] * 9 + sh[ok]) * 9 + sw[ok]
                    V = len(op)
                    rows = op[:, None, None] * 9 + co[None, :, None]
                    cols = ip[:, None, None] * 8 + ci[None, None, :]
                    vals = K[None, :, a, b, c, :8]
                    fr.append(np.broadcast_to(rows, (V, 9, 8)).ravel())
                    fc.append(np.broadcast_to(cols, (V, 9, 8)).ravel())
                    fv.append(np.broadcast_to(vals, (V, 9, 8)).ravel())
                    lr.append((op[:, None] * 9 + co[None, :]).ravel())
                    lc.append(np.broadcast_to(ip[:, None], (V, 9)).ravel())
                    lv.append(np.broadcast_to(K[None, :, a, b, c, 8], (V, 9)).ravel())
        C_feat = csr_matrix(
            (np.concatenate(fv), (np.concatenate(fr), np.concatenate(fc))),
            shape=(729 * 9, HEAD_OUT), dtype=np.float32,
        )
        self.A_T = np.ascontiguousarray((C_feat @ Wh).T)
        self.bias = C_feat @ model._w("head.b") + np.tile(model._w("conv1.b"), 729)
        self.local_map = csr_matrix(
            (np.concatenate(lv), (np.concatenate(lr), np.concatenate(lc))),
            shape=(729 * 9, 729), dtype=np.float32,
        )

        # conv2 (stride 2) as one sparse matrix over the 5x5x5 x C outputs
        K2 = model._w("conv2.K")         # (C, 3, 3, 3, 9)
        C = K2.shape[0]
        oz, oy, ox = np.meshgrid(np.arange(5), np.arange(5), np.arange(5), indexing="ij")
        out_pos = np.stack([oz, oy, ox], axis=-1).reshape(125, 3)
        taps = np.stack(np.meshgrid(*[np.arange(3)] * 3, indexing="ij"), axis=-1).reshape(27, 3)
        src = 2 * out_pos[:, None, :] + taps[None, :, :] - 1      # (125, 27, 3)
        valid = np.all((src >= 0) & (src < 9), axis=-1)
        op2, tp2 = np.nonzero(valid)
        ip2 = (src[op2, tp2, 0] * 9 + src[op2, tp2, 1]) * 9 + src[op2, tp2, 2]
        co2, ci2 = np.arange(C), np.arange(9)
        r2 = (op2[:, None, None] * C + co2[None, :, None])
        c2 = (ip2[:, None, None] * 9 + ci2[None, None, :])
        v2 = K2[:, taps[tp2, 0], taps[tp2, 1], taps[tp2, 2], :].transpose(1, 0, 2)
        V2 = len(op2)
        self.conv2_map = csr_matrix(
            (v2.ravel(),
             (np.broadcast_to(r2, (V2, C, 9)).ravel(),
              np.broadcast_to(c2, (V2, C, 9)).ravel())),
            shape=(125 * C, 729 * 9), dtype=np.float32,
        )
        self.b2 = model._w("conv2.b")
        self.class_count = C

    def forward_batch(self, descs):
        m = self.model
        descs = np.asarray(descs, m.dtype)
        N = descs.shape[0]
        flat = m.encode_batch(descs)
        pre = flat @ self.A_T
        pre += (self.local_map @ descs[:, 3, :].T).T
        pre += self.bias
        np.maximum(pre, 0.0, out=pre)
        logits = (self.conv2_map @ pre.T).T.reshape(N, 5, 5, 5, self.class_count)
        return logits + self.b2


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Independent parameter-count oracle summed from the layer shape table."""
    w, d, T, C = cfg.grid_proj_width, cfg.model_width, GRID_COUNT, cfg.class_count
    n = T * (SAMPLES_PER_GRID * w + w)            # projections
    n += (T * w) * d + d                          # fusion
    if cfg.variant == "mlp_only":
        n += d * (T * d) + T * d                  # single feed-forward
    else:
        n += T * (w * d + d)                      # lifts
        if cfg.variant in ("full", "residual_only"):
            n += cfg.n_residual_blocks * (2 * (d * d + d) + 2 * d)
        if cfg.variant in ("full", "transformer_only"):
            n += cfg.n_encoder_layers * (4 * (d * d + d) + 2 * d + 2 * (d * d + d) + 2 * d)
    n += (T * d) * HEAD_OUT + HEAD_OUT            # head
    n += 9 * 27 * 9 + 9                           # conv1
    n += C * 27 * 9 + C                           # conv2
    return n


# ---------------------------------------------------------------------------
# Checkpoint serialization (little-endian throughout)


def save_checkpoint(model: ResidualTransformer, f) -> None:
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_blob = json.dumps(asdict(model.cfg), sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(cfg_blob)))
    f.write(cfg_blob)
    names = sorted(model.params)
    f.write(struct.pack("<I", len(names)))
    for name in names:
        val = model.params[name].value
        nb = name.encode("utf-8")
        f.write(struct.pack("<I", len(nb)))
        f.write(nb)
        f.write(struct.pack("<I", val.ndim))
        f.write(struct.pack(f"<{val.ndim}I", *val.shape))
        f.write(np.ascontiguousarray(val, dtype="<f4").tobytes())


def load_checkpoint(f) -> ResidualTransformer:
    def need(n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise CheckpointTruncated(f"truncated while reading {what}")
        return buf

    magic = need(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointBadMagic(f"bad magic {magic!r}")
    version = struct.unpack("<I", need(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionMismatch(f"version {version}, expected {CHECKPOINT_VERSION}")
    cfg_len = struct.unpack("<I", need(4, "config length"))[0]
    try:
        cfg = ModelConfig(**json.loads(need(cfg_len, "config").decode("utf-8")))
    except (ValueError, TypeError) as e:
        raise CheckpointStructureError(f"bad config record: {e}") from e

    model = ResidualTransformer(cfg)
    count = struct.unpack("<I", need(4, "tensor count"))[0]
    if count != len(model.params):
        raise CheckpointStructureError(
            f"tensor count {count}, config implies {len(model.params)}"
        )
    seen = set()
    for _ in range(count):
        nlen = struct.unpack("<I", need(4, "name length"))[0]
        name = need(nlen, "name").decode("utf-8")
        rank = struct.unpack("<I", need(4, "rank"))[0]
        shape = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        if name not in model.params:
            raise CheckpointStructureError(f"unknown tensor {name!r}")
        expected = model.params[name].value.shape
        if tuple(shape) != expected:
            raise CheckpointShapeMismatch(
                f"tensor {name!r} has shape {shape}, config implies {expected}"
            )
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = need(4 * n, f"payload of {name!r}")
        model.params[name].value[...] = np.frombuffer(payload, "<f4").reshape(shape)
        seen.add(name)
    if seen != set(model.params):
        raise CheckpointStructureError("duplicate or missing tensors")
    return model
