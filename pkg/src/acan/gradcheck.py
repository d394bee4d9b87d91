"""Finite-difference verification of every analytic gradient in the package.

Each check draws ``instances`` random problems from a seeded generator and
reports the worst relative error seen. Networks are kept tiny so that the
coordinate-wise central differences stay cheap.
"""
from __future__ import annotations

import numpy as np

from .core import (
    GradCheckReport,
    LinearLayer,
    Network,
    backward_discriminator,
    backward_extractor,
    forward_discriminator,
    forward_extractor,
    numerical_gradient,
    relative_error,
    softmax,
)
from .objectives import (
    Scheme,
    ace_loss,
    batch_hard_triplet,
    discriminator_loss,
    generator_adversarial_loss,
    grl_backward,
    oce_loss,
    pairwise_distances,
)

STEP = 1e-5


def _random_net(rng, input_dim=5, hidden=(6, 5), embedding_dim=4, cameras=3) -> Network:
    net = Network.init(rng, input_dim, cameras, hidden=hidden, embedding_dim=embedding_dim)
    for layer in [*net.extractor, net.discriminator]:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    return net


def _flat(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a).reshape(-1) for a in arrays])


def _assign(arrays, flat) -> None:
    pos = 0
    for a in arrays:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size


def _compare(numeric, analytic) -> float:
    return float(relative_error(numeric, analytic).max())


def check_linear(rng) -> float:
    layer = LinearLayer(rng.normal(size=(4, 3)), rng.normal(size=4))
    x = rng.normal(size=(5, 3))
    upstream = rng.normal(size=(5, 4))
    gw, gb, gx = layer.backward(x, upstream)

    def loss_w(w):
        return float((upstream * LinearLayer(w, layer.bias).forward(x)).sum())

    def loss_b(b):
        return float((upstream * LinearLayer(layer.weight, b).forward(x)).sum())

    def loss_x(xx):
        return float((upstream * layer.forward(xx)).sum())

    return max(
        _compare(numerical_gradient(loss_w, layer.weight, STEP), gw),
        _compare(numerical_gradient(loss_b, layer.bias, STEP), gb),
        _compare(numerical_gradient(loss_x, x, STEP), gx),
    )


def check_extractor(rng) -> float:
    """Linear layers + ReLU: all extractor parameters and the input."""
    net = _random_net(rng)
    x = rng.normal(size=(7, net.input_dim))
    upstream = rng.normal(size=(7, net.embedding_dim))
    emb, cache = forward_extractor(net, x)
    grads, gx = backward_extractor(net, cache, upstream)
    params = net.extractor_params()
    theta0 = _flat(params)

    def loss_params(theta):
        _assign(params, theta)
        out = float((upstream * forward_extractor(net, x)[0]).sum())
        _assign(params, theta0)
        return out

    def loss_input(xx):
        return float((upstream * forward_extractor(net, xx)[0]).sum())

    return max(
        _compare(numerical_gradient(loss_params, theta0, STEP), _flat(grads)),
        _compare(numerical_gradient(loss_input, x, STEP), gx),
    )


def _logit_check(rng, loss_fn) -> float:
    n, c = 6, int(rng.integers(2, 7))
    logits = rng.normal(scale=2.0, size=(n, c))
    labels = rng.integers(0, c, size=n)
    _, grad = loss_fn(softmax(logits), labels)

    def f(z):
        return loss_fn(softmax(z), labels)[0]

    return _compare(numerical_gradient(f, logits, STEP), grad)


def check_discriminator_ce(rng) -> float:
    """Cross-entropy through the softmax, then through the discriminator weights."""
    err = _logit_check(rng, discriminator_loss)
    net = _random_net(rng)
    emb = rng.normal(size=(6, net.embedding_dim))
    labels = rng.integers(0, net.num_cameras, size=6)
    _, probs = forward_discriminator(net, emb)
    _, g_logits = discriminator_loss(probs, labels)
    d_grads, g_emb = backward_discriminator(net, emb, g_logits)
    params = net.discriminator_params()
    theta0 = _flat(params)

    def f(theta):
        _assign(params, theta)
        out = discriminator_loss(forward_discriminator(net, emb)[1], labels)[0]
        _assign(params, theta0)
        return out

    def f_emb(e):
        return discriminator_loss(forward_discriminator(net, e)[1], labels)[0]

    return max(
        err,
        _compare(numerical_gradient(f, theta0, STEP), _flat(d_grads)),
        _compare(numerical_gradient(f_emb, emb, STEP), g_emb),
    )


def check_oce(rng) -> float:
    return _logit_check(rng, oce_loss)


def check_ace(rng) -> float:
    return _logit_check(rng, ace_loss)


def stable_triplet_batch(rng, persons=3, per=3, cameras=2, dim=4, min_gap=1e-3, margin=0.3):
    """Random embeddings whose mined pairs and hinge states are locally stable."""
    ids = np.tile(np.repeat(np.arange(persons), per), cameras)
    cams = np.repeat(np.arange(cameras), persons * per)
    while True:
        emb = rng.normal(size=(ids.size, dim))
        if triplet_mining_gap(emb, ids, cams, margin) > min_gap:
            return emb, ids, cams


def triplet_mining_gap(emb, ids, cams, margin) -> float:
    """Smallest margin by which any mining choice or hinge state could flip."""
    d = pairwise_distances(emb)
    gaps = [np.inf]
    for a in range(len(ids)):
        same_cam = cams == cams[a]
        pos = np.flatnonzero(same_cam & (ids == ids[a]) & (np.arange(len(ids)) != a))
        neg = np.flatnonzero(same_cam & (ids != ids[a]))
        if pos.size == 0 or neg.size == 0:
            continue
        dp = np.sort(d[a, pos])[::-1]
        dn = np.sort(d[a, neg])
        if dp.size > 1:
            gaps.append(dp[0] - dp[1])
        if dn.size > 1:
            gaps.append(dn[1] - dn[0])
        gaps.append(abs(margin + dp[0] - dn[0]))
        gaps.append(dn[0])
        gaps.append(dp[0])
    return float(min(gaps))


def check_triplet(rng, margin=0.3) -> float:
    emb, ids, cams = stable_triplet_batch(rng, margin=margin)
    res = batch_hard_triplet(emb, ids, cams, margin)

    def f(e):
        return batch_hard_triplet(e, ids, cams, margin).loss

    return _compare(numerical_gradient(f, emb, STEP), res.grad)


def _adversarial_check(rng, scheme: Scheme, lam: float) -> float:
    """Gradient reaching the extractor parameters from the generator objective."""
    net = _random_net(rng)
    x = rng.normal(size=(6, net.input_dim))
    z = rng.integers(0, net.num_cameras, size=6)
    emb, cache = forward_extractor(net, x)
    _, probs = forward_discriminator(net, emb)
    term = generator_adversarial_loss(scheme, probs, z, lam)
    _, g_emb = backward_discriminator(net, emb, term.grad_logits)
    if term.reverse_lambda is not None:
        g_emb = grl_backward(g_emb, term.reverse_lambda)
    grads, _ = backward_extractor(net, cache, g_emb)

    params = net.extractor_params()
    theta0 = _flat(params)

    def f(theta):
        _assign(params, theta)
        p = forward_discriminator(net, forward_extractor(net, x)[0])[1]
        if scheme is Scheme.GRL:
            # extractor objective behind the reversal: -lam * L_D
            out = -lam * discriminator_loss(p, z)[0]
        else:
            out = generator_adversarial_loss(scheme, p, z, lam).loss
        _assign(params, theta0)
        return out

    return _compare(numerical_gradient(f, theta0, STEP), _flat(grads))


def check_grl(rng) -> float:
    lam = float(rng.uniform(0.5, 2.0))
    return _adversarial_check(rng, Scheme.GRL, lam)


def check_oce_extractor(rng) -> float:
    return _adversarial_check(rng, Scheme.OCE, float(rng.uniform(0.5, 2.0)))


def check_ace_extractor(rng) -> float:
    return _adversarial_check(rng, Scheme.ACE, float(rng.uniform(0.5, 2.0)))


CHECKS = {
    "linear_layer": check_linear,
    "extractor_relu": check_extractor,
    "discriminator_ce": check_discriminator_ce,
    "oce_loss": check_oce,
    "ace_loss": check_ace,
    "triplet_batch_hard": check_triplet,
    "grl_reversal": check_grl,
    "oce_through_extractor": check_oce_extractor,
    "ace_through_extractor": check_ace_extractor,
}


def run_suite(seed: int = 0, tolerance: float = 1e-4, instances: int = 10, names=None) -> list:
    reports = []
    for k, (name, check) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, k, i])
            worst = max(worst, check(rng))
        reports.append(GradCheckReport(name, worst, STEP, tolerance, worst <= tolerance))
    return reports
