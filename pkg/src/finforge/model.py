"""Decoder-only transformer with ALiBi attention, pure numpy.

Embeddings with an extra LayerNorm, pre-LN residual blocks (multi-head
self-attention with ALiBi biases, then a GELU feed-forward), and a tied
LM head without bias. Forward, cross-entropy loss, and hand-derived
reverse-mode gradients, all in float64 for verification.

Attention is computed one query column at a time with `np.einsum`, so every
output position depends only on its prefix bit-for-bit: logits for positions
1..t are identical whether or not later tokens are present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scaling import ModelShape, count_parameters

GELU_C0 = 0.79788456
GELU_C1 = 0.044715

_DROP_ATTN, _DROP_HIDDEN, _DROP_FFN = 0, 1, 2


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in the computation graph."""


@dataclass(frozen=True)
class ForwardConfig:
    p_at: float = 0.0
    p_h: float = 0.0
    p_f: float = 0.0
    training: bool = False
    rng_seed: int = 0
    step: int = 0
    eps: float = 1e-5
    qk_layer_scaling: bool = False

    def dropout(self, which: float) -> float:
        return which if self.training else 0.0


@dataclass(frozen=True)
class AlibiSpec:
    heads: int
    seq_len: int
    slopes: np.ndarray  # (N,)
    biases: np.ndarray  # (N, T, T); rows index keys, columns queries
    mask: np.ndarray  # (T, T); 1 where key <= query, -inf where key > query


def alibi_slopes(heads: int) -> np.ndarray:
    """Per-head distance-penalty slopes; exact powers of two when the head
    count is a power of two, interleaved half-steps otherwise."""
    n_pow = 2 ** math.floor(math.log2(heads))
    n = np.arange(1, heads + 1)
    n_tilde = 1 + ((n - 1) % n_pow) - 0.5 * ((n - 1) // n_pow)
    return 2.0 ** (-(8.0 / heads) * n_tilde)


def alibi_matrices(heads: int, seq_len: int) -> AlibiSpec:
    if heads < 1 or seq_len < 1:
        raise ValueError("heads and seq_len must be at least 1")
    slopes = alibi_slopes(heads)
    i = np.arange(seq_len)[:, None]  # key position
    j = np.arange(seq_len)[None, :]  # query position
    dist = np.where(i < j, (i - j).astype(float), 0.0)
    biases = slopes[:, None, None] * dist[None, :, :]
    mask = np.where(i <= j, 1.0, -np.inf)
    return AlibiSpec(heads, seq_len, slopes, biases, mask)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C0 * x * (1.0 + GELU_C1 * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = GELU_C0 * x * (1.0 + GELU_C1 * x * x)
    t = np.tanh(u)
    du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def layer_norm(x, gain, bias, eps):
    """Row-wise LayerNorm with population variance; x is (T, D)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias


def _ln_fwd(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _ln_bwd(dy, cache):
    xhat, inv, gain = cache
    dxhat = dy * gain
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) * inv
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# Parameters


def param_names(shape: ModelShape) -> list[str]:
    names = ["Wem", "ln_em.g", "ln_em.b"]
    for l in range(shape.layers):
        p = f"layer{l}."
        names += [p + "ln_in.g", p + "ln_in.b"]
        names += [p + "attn." + k for k in ("Wq", "Wk", "Wv", "bq", "bk", "bv", "U", "c")]
        names += [p + "ln_at.g", p + "ln_at.b"]
        names += [p + "ffn." + k for k in ("W", "b", "U", "c")]
    names += ["ln_f.g", "ln_f.b"]
    return names


def init_params(shape: ModelShape, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Gaussian init with std 1/sqrt(3D); the attention output map and the
    second FFN layer are rescaled by 1/sqrt(2L). Gains start at 1, biases 0."""
    L, N = shape.layers, shape.heads
    D, Dh, Df, V = shape.hidden, shape.head_dim, shape.ffn_hidden, shape.vocab
    z = 1.0 / math.sqrt(3.0 * D)
    zp = z / math.sqrt(2.0 * L) if L > 0 else z
    rng = np.random.default_rng(seed)

    def normal(std, *dims):
        return rng.normal(0.0, std, size=dims).astype(dtype)

    params = {
        "Wem": normal(z, D, V),
        "ln_em.g": np.ones(D, dtype=dtype),
        "ln_em.b": np.zeros(D, dtype=dtype),
    }
    for l in range(L):
        p = f"layer{l}."
        params[p + "ln_in.g"] = np.ones(D, dtype=dtype)
        params[p + "ln_in.b"] = np.zeros(D, dtype=dtype)
        params[p + "attn.Wq"] = normal(z, N, Dh, D)
        params[p + "attn.Wk"] = normal(z, N, Dh, D)
        params[p + "attn.Wv"] = normal(z, N, Dh, D)
        params[p + "attn.bq"] = np.zeros((N, Dh), dtype=dtype)
        params[p + "attn.bk"] = np.zeros((N, Dh), dtype=dtype)
        params[p + "attn.bv"] = np.zeros((N, Dh), dtype=dtype)
        params[p + "attn.U"] = normal(zp, N, D, Dh)
        params[p + "attn.c"] = np.zeros(D, dtype=dtype)
        params[p + "ln_at.g"] = np.ones(D, dtype=dtype)
        params[p + "ln_at.b"] = np.zeros(D, dtype=dtype)
        params[p + "ffn.W"] = normal(z, Df, D)
        params[p + "ffn.b"] = np.zeros(Df, dtype=dtype)
        params[p + "ffn.U"] = normal(zp, D, Df)
        params[p + "ffn.c"] = np.zeros(D, dtype=dtype)
    params["ln_f.g"] = np.ones(D, dtype=dtype)
    params["ln_f.b"] = np.zeros(D, dtype=dtype)

    assert sum(v.size for v in params.values()) == count_parameters(shape).grand_total
    return params


def init_std(hidden: int) -> float:
    return 1.0 / math.sqrt(3.0 * hidden)


def _dropout_mask(cfg: ForwardConfig, layer: int, site: int, p: float, *dims):
    if p <= 0.0:
        return None
    key = np.array(
        [cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, (cfg.step << 16) ^ (layer << 4) ^ site],
        dtype=np.uint64,
    )
    rng = np.random.Generator(np.random.Philox(key=key))
    return (rng.random(dims) >= p) / (1.0 - p)


# ---------------------------------------------------------------------------
# Forward / loss / backward


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values at {where}")


def _forward(params, tokens, shape: ModelShape, cfg: ForwardConfig):
    """Run the network; returns (logits (V, T), cache for backward)."""
    L, N = shape.layers, shape.heads
    D, Dh, V = shape.hidden, shape.head_dim, shape.vocab
    tokens = np.asarray(tokens, dtype=np.intp)
    T = tokens.shape[0]
    if T < 1:
        raise ValueError("need at least one token")
    if tokens.min() < 0 or tokens.max() >= V:
        raise ValueError("token id out of range")

    inv_sqrt_dh = 1.0 / math.sqrt(Dh)
    alibi = alibi_matrices(N, T)
    p_at, p_h, p_f = cfg.dropout(cfg.p_at), cfg.dropout(cfg.p_h), cfg.dropout(cfg.p_f)

    emb = params["Wem"][:, tokens].T  # (T, D)
    h, ln_em_cache = _ln_fwd(emb, params["ln_em.g"], params["ln_em.b"], cfg.eps)
    _check_finite(h, "embedding LayerNorm")

    layer_caches = []
    for l in range(L):
        p = f"layer{l}."
        xn, ln_in_cache = _ln_fwd(h, params[p + "ln_in.g"], params[p + "ln_in.b"], cfg.eps)

        Wq, Wk, Wv = params[p + "attn.Wq"], params[p + "attn.Wk"], params[p + "attn.Wv"]
        bq, bk, bv = params[p + "attn.bq"], params[p + "attn.bk"], params[p + "attn.bv"]
        Q = np.einsum("td,nhd->nth", xn, Wq) + bq[:, None, :]
        K = np.einsum("td,nhd->nth", xn, Wk) + bk[:, None, :]
        Vv = np.einsum("td,nhd->nth", xn, Wv) + bv[:, None, :]

        amask = _dropout_mask(cfg, l, _DROP_ATTN, p_at, N, T, T)
        scale = float(l + 1) if cfg.qk_layer_scaling else 1.0
        probs = []  # per query: pre-dropout softmax over its prefix keys
        ybar = np.empty((N, T, Dh))
        for j in range(T):
            s = (
                np.einsum("nih,nh->ni", K[:, : j + 1, :], Q[:, j, :]) * inv_sqrt_dh
                + alibi.biases[:, : j + 1, j]
            ) / scale
            s = s - s.max(axis=1, keepdims=True)
            e = np.exp(s)
            pj = e / e.sum(axis=1, keepdims=True)
            probs.append(pj)
            pd = pj if amask is None else pj * amask[:, : j + 1, j]
            ybar[:, j, :] = np.einsum("ni,nih->nh", pd, Vv[:, : j + 1, :])

        U, c = params[p + "attn.U"], params[p + "attn.c"]
        y = np.einsum("nth,ndh->td", ybar, U) + c
        hmask = _dropout_mask(cfg, l, _DROP_HIDDEN, p_h, T, D)
        yd = y if hmask is None else y * hmask
        hbar = h + yd
        _check_finite(hbar, f"layer {l} attention output")

        xf, ln_at_cache = _ln_fwd(
            hbar, params[p + "ln_at.g"], params[p + "ln_at.b"], cfg.eps
        )
        a = np.einsum("td,fd->tf", xf, params[p + "ffn.W"]) + params[p + "ffn.b"]
        g = gelu(a)
        o = np.einsum("tf,df->td", g, params[p + "ffn.U"]) + params[p + "ffn.c"]
        fmask = _dropout_mask(cfg, l, _DROP_FFN, p_f, T, D)
        od = o if fmask is None else o * fmask
        h_next = hbar + od
        _check_finite(h_next, f"layer {l} FFN output")

        layer_caches.append(
            dict(
                h=h, ln_in=ln_in_cache, xn=xn, Q=Q, K=K, Vv=Vv, probs=probs,
                amask=amask, ybar=ybar, hmask=hmask, hbar=hbar, ln_at=ln_at_cache,
                xf=xf, a=a, g=g, fmask=fmask, scale=scale,
            )
        )
        h = h_next

    z, ln_f_cache = _ln_fwd(h, params["ln_f.g"], params["ln_f.b"], cfg.eps)
    logits = np.einsum("td,dv->tv", z, params["Wem"])  # tied head, no bias
    _check_finite(logits, "lm head")
    cache = dict(
        tokens=tokens, ln_em=ln_em_cache, layers=layer_caches, ln_f=ln_f_cache,
        z=z, alibi=alibi, inv_sqrt_dh=inv_sqrt_dh,
    )
    return logits.T, cache


def forward(params, tokens, shape: ModelShape, cfg: ForwardConfig | None = None):
    """Logits (V, T) for a token sequence."""
    cfg = cfg or ForwardConfig()
    logits, _ = _forward(params, tokens, shape, cfg)
    return logits


def cross_entropy_loss(logits: np.ndarray, targets, weights=None) -> float:
    """Mean next-token negative log-likelihood in nats; logits are (V, T).

    ``weights`` optionally weights positions (e.g. to exclude document
    separators); the default is uniform."""
    targets = np.asarray(targets, dtype=np.intp)
    lt = logits.T  # (T, V)
    m = lt.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lt - m).sum(axis=1))
    nll = lse - lt[np.arange(lt.shape[0]), targets]
    if weights is None:
        return float(np.mean(nll))
    w = np.asarray(weights, dtype=float)
    return float((nll * w).sum() / w.sum())


def _loss_grad_logits(logits, targets, weights=None) -> tuple[float, np.ndarray]:
    targets = np.asarray(targets, dtype=np.intp)
    lt = logits.T
    T = lt.shape[0]
    m = lt.max(axis=1, keepdims=True)
    e = np.exp(lt - m)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(T), targets])
    dlt = probs.copy()
    dlt[np.arange(T), targets] -= 1.0
    if weights is None:
        return float(nll.mean()), dlt / T  # (T, V)
    w = np.asarray(weights, dtype=float)
    return float((nll * w).sum() / w.sum()), dlt * (w / w.sum())[:, None]


def backward(params, tokens, targets, shape: ModelShape, cfg: ForwardConfig, weights=None):
    """Loss and exact gradients of cross_entropy_loss(forward(.))."""
    logits, cache = _forward(params, tokens, shape, cfg)
    loss, dlt = _loss_grad_logits(logits, targets, weights)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    tok = cache["tokens"]
    z = cache["z"]
    alibi = cache["alibi"]
    inv_sqrt_dh = cache["inv_sqrt_dh"]

    # Tied LM head: gradient flows into the embedding matrix twice.
    grads["Wem"] += np.einsum("tv,td->dv", dlt, z)
    dz = np.einsum("tv,dv->td", dlt, params["Wem"])
    dh, dg, db = _ln_bwd(dz, cache["ln_f"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for l in range(shape.layers - 1, -1, -1):
        p = f"layer{l}."
        c = cache["layers"][l]
        # h_next = hbar + drop(o)
        do = dh if c["fmask"] is None else dh * c["fmask"]
        grads[p + "ffn.U"] += np.einsum("td,tf->df", do, c["g"])
        grads[p + "ffn.c"] += do.sum(axis=0)
        dgel = np.einsum("td,df->tf", do, params[p + "ffn.U"])
        da = dgel * gelu_grad(c["a"])
        grads[p + "ffn.W"] += np.einsum("tf,td->fd", da, c["xf"])
        grads[p + "ffn.b"] += da.sum(axis=0)
        dxf = np.einsum("tf,fd->td", da, params[p + "ffn.W"])
        dhbar_ln, dgat, dbat = _ln_bwd(dxf, c["ln_at"])
        grads[p + "ln_at.g"] += dgat
        grads[p + "ln_at.b"] += dbat
        dhbar = dh + dhbar_ln

        dyd = dhbar
        dy = dyd if c["hmask"] is None else dyd * c["hmask"]
        grads[p + "attn.c"] += dy.sum(axis=0)
        grads[p + "attn.U"] += np.einsum("td,nth->ndh", dy, c["ybar"])
        dybar = np.einsum("td,ndh->nth", dy, params[p + "attn.U"])

        Q, K, Vv = c["Q"], c["K"], c["Vv"]
        dQ = np.zeros_like(Q)
        dK = np.zeros_like(K)
        dV = np.zeros_like(Vv)
        T = Q.shape[1]
        for j in range(T):
            pj = c["probs"][j]  # (N, j+1)
            am = None if c["amask"] is None else c["amask"][:, : j + 1, j]
            pd = pj if am is None else pj * am
            dyb = dybar[:, j, :]  # (N, Dh)
            dpd = np.einsum("nh,nih->ni", dyb, Vv[:, : j + 1, :])
            dV[:, : j + 1, :] += np.einsum("ni,nh->nih", pd, dyb)
            dpj = dpd if am is None else dpd * am
            ds = pj * (dpj - (dpj * pj).sum(axis=1, keepdims=True))
            ds = ds * (inv_sqrt_dh / c["scale"])
            dK[:, : j + 1, :] += np.einsum("ni,nh->nih", ds, Q[:, j, :])
            dQ[:, j, :] = np.einsum("ni,nih->nh", ds, K[:, : j + 1, :])

        xn = c["xn"]
        dxn = np.zeros_like(xn)
        for name, dmat in (("q", dQ), ("k", dK), ("v", dV)):
            grads[p + f"attn.W{name}"] += np.einsum("nth,td->nhd", dmat, xn)
            grads[p + f"attn.b{name}"] += dmat.sum(axis=1)
            dxn += np.einsum("nth,nhd->td", dmat, params[p + f"attn.W{name}"])
        dh_ln, dgin, dbin = _ln_bwd(dxn, c["ln_in"])
        grads[p + "ln_in.g"] += dgin
        grads[p + "ln_in.b"] += dbin
        dh = dhbar + dh_ln

    demb, dgem, dbem = _ln_bwd(dh, cache["ln_em"])
    grads["ln_em.g"] += dgem
    grads["ln_em.b"] += dbem
    np.add.at(grads["Wem"].T, tok, demb)
    return loss, grads


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(
    params,
    tokens,
    targets,
    shape: ModelShape,
    cfg: ForwardConfig,
    h: float = 1e-5,
    sample_count: int = 5,
    seed: int = 0,
) -> dict[str, float]:
    """Central-difference check of analytic gradients on a random sample of
    coordinates per parameter group; returns max relative error per group."""
    _, grads = backward(params, tokens, targets, shape, cfg)
    rng = np.random.default_rng(seed)
    report = {}

    def loss_fn():
        logits, _ = _forward(params, tokens, shape, cfg)
        return _loss_grad_logits(logits, targets)[0]

    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        idx = rng.choice(flat.size, size=min(sample_count, flat.size), replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, err)
        report[name] = worst
    return report


@dataclass
class LanguageModel:
    """Bundle of shape, parameters, and inference settings."""

    shape: ModelShape
    params: dict[str, np.ndarray]
    eps: float = 1e-5
    qk_layer_scaling: bool = False

    def logits(self, tokens) -> np.ndarray:
        cfg = ForwardConfig(eps=self.eps, qk_layer_scaling=self.qk_layer_scaling)
        return forward(self.params, tokens, self.shape, cfg)
