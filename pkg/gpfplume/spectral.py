"""
Random-matrix diagnostics for GPF networks.

Empirical spectra of layer Gram matrices, the Marchenko-Pastur reference law, Stieltjes
transforms and a propagate-and-measure probe of how the transform changes with depth.
Eigenvalues come from LAPACK's symmetric solver (scipy.linalg.eigh, divide and conquer).
"""
from dataclasses import dataclass
from typing import Optional
import logging
import numpy as np
import pandas as pd
import scipy.linalg
import scipy.integrate

from gpfplume.util import SpectralError
from gpfplume.tokenizer import all_tokens, encode_onehot

logger = logging.getLogger('gpfplume')

QUAD_EPSABS = 1e-8


@dataclass
class Esd:
    values: np.ndarray                # ascending
    layer: Optional[int] = None
    episode: Optional[int] = None

    def __len__(self):
        return(len(self.values))


@dataclass
class MpLaw:
    q: float
    sigma2: float = 1.0

    def __post_init__(self):
        if not (self.q > 0 and self.sigma2 > 0):
            raise ValueError(f'MP law needs q > 0 and sigma2 > 0, got q={self.q}, sigma2={self.sigma2}')

    @property
    def lower(self):
        return(self.sigma2 * (1.0 - np.sqrt(self.q)) ** 2)

    @property
    def upper(self):
        return(self.sigma2 * (1.0 + np.sqrt(self.q)) ** 2)

    @property
    def zero_mass(self):
        return(max(0.0, 1.0 - 1.0 / self.q))


def default_z_grid():
    return(np.linspace(-1.0, 6.0, 21) + 0.1j)


def gram_esd(W, m, layer=None, episode=None) -> Esd:
    """
    eigenvalues of (1/m) W^T W, ascending

    :param W: real matrix
    :param m: normaliser, > 0
    """
    W = np.asarray(W, dtype=float)
    if not np.all(np.isfinite(W)):
        raise ValueError('matrix has non-finite entries')
    if m <= 0:
        raise ValueError('m must be > 0')
    M = (W.T @ W) / m
    try:
        vals = scipy.linalg.eigh(M, eigvals_only=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SpectralError('symmetric eigensolver did not converge: ' + str(exc)) from exc
    return(Esd(np.sort(vals), layer, episode))


def stieltjes(esd: Esd, z) -> complex:
    """ mean of 1 / (lambda_i - z) """
    z = complex(z)
    if z.imag == 0:
        raise ValueError('Stieltjes transform needs Im(z) != 0')
    return(complex(np.mean(1.0 / (esd.values - z))))


def stieltjes_grid(esd: Esd, zs) -> np.ndarray:
    zs = np.asarray(zs, dtype=complex)
    if np.any(zs.imag == 0):
        raise ValueError('Stieltjes transform needs Im(z) != 0')
    return(np.mean(1.0 / (esd.values[:, None] - zs[None, :]), axis=0))


def mp_pdf(law: MpLaw, x):
    """ continuous part of the MP density, zero outside [lower, upper] """
    x = np.asarray(x, dtype=float)
    lo, hi = law.lower, law.upper
    inside = (x > lo) & (x < hi) & (x > 0)
    safe = np.where(inside, x, 1.0)
    dens = np.sqrt(np.clip((hi - safe) * (safe - lo), 0.0, None)) / (2.0 * np.pi * law.q * law.sigma2 * safe)
    out = np.where(inside, dens, 0.0)
    if out.ndim == 0:
        return(float(out))
    return(out)


def mp_cdf(law: MpLaw, lam) -> float:
    """
    MP distribution function by adaptive quadrature, with the point mass 1 - 1/q at zero when q > 1
    """
    lam = float(lam)
    if lam < 0:
        return(0.0)
    if lam >= law.upper:
        return(1.0)
    mass = law.zero_mass
    if lam <= law.lower:
        return(mass)
    val, _ = scipy.integrate.quad(lambda x: mp_pdf(law, x), law.lower, lam, epsabs=QUAD_EPSABS, limit=200)
    return(float(min(1.0, max(0.0, mass + val))))


def ks_distance(esd: Esd, law: MpLaw) -> float:
    """ sup distance between the empirical distribution of the spectrum and the MP law """
    vals = np.sort(esd.values)
    n = len(vals)
    if n == 0:
        raise ValueError('empty spectrum')
    F = np.array([mp_cdf(law, v) for v in vals])
    i = np.arange(1, n + 1)
    return(float(max(np.max(i / n - F), np.max(F - (i - 1) / n))))


def weight_esd(W, layer=None, episode=None) -> Esd:
    """ spectrum of (1/fan_out) W^T W for a weight matrix stored as (fan_out, fan_in) """
    return(gram_esd(W, W.shape[0], layer, episode))


def variance_matched_law(W) -> MpLaw:
    """ MP law with q = fan_in / fan_out and sigma^2 the empirical variance of W """
    W = np.asarray(W, dtype=float)
    return(MpLaw(q=W.shape[1] / W.shape[0], sigma2=float(np.var(W))))


def calibrate_ks_threshold(width=64, draws=50, seed=0, quantile=0.95):
    """
    Monte-Carlo KS distances of fresh Kaiming width x width layers against their
    variance-matched MP law

    :return: (mean KS, KS at `quantile`) over the draws
    """
    rng = np.random.default_rng(seed)
    stats = []
    for _ in range(draws):
        W = rng.normal(0.0, np.sqrt(2.0 / width), size=(width, width))
        stats.append(ks_distance(weight_esd(W), variance_matched_law(W)))
    stats = np.array(stats)
    return(float(stats.mean()), float(np.quantile(stats, quantile)))


def network_spectra(net, episode=None):
    """ per-layer weight ESDs of a GpfNetwork """
    return([weight_esd(layer.W, i, episode) for i, layer in enumerate(net.layers)])


def esd_table(esds) -> pd.DataFrame:
    rows = []
    for e in esds:
        for k, v in enumerate(e.values):
            rows.append({'episode': e.episode, 'layer': e.layer, 'index': k, 'value': float(v)})
    return(pd.DataFrame(rows, columns=['episode', 'layer', 'index', 'value']))


def ks_table(net, threshold=None) -> pd.DataFrame:
    rows = []
    for i, layer in enumerate(net.layers):
        law = variance_matched_law(layer.W)
        ks = ks_distance(weight_esd(layer.W, i), law)
        rows.append({'layer': i, 'q': law.q, 'sigma2': law.sigma2, 'ks': ks, 'frozen': layer.frozen,
                     'within_threshold': None if threshold is None else bool(ks <= threshold)})
    return(pd.DataFrame(rows))


def probe_batch():
    """ the 392 one-hot observation states, a fixed input batch """
    return(np.array([encode_onehot(t) for t in all_tokens()]))


def hidden_activations(net, X):
    """ post-ReLU outputs of every hidden layer for batch X (rows are samples) """
    acts = []
    a = np.asarray(X, dtype=float)
    for layer in net.layers[:-1]:
        a = np.maximum(a @ layer.W.T + layer.b, 0.0)
        acts.append(a)
    return(acts)


def _check_snapshots(snapshots):
    if len(snapshots) == 0:
        raise ValueError('no snapshots given')
    ref = snapshots[0].layers[0].W.shape[1], snapshots[0].layers[0].W.shape[0]
    for net in snapshots:
        if (net.layers[0].W.shape[1], net.layers[0].W.shape[0]) != ref:
            raise ValueError('snapshots disagree on input dim or hidden width')
        for layer in net.layers[1:-1]:
            if layer.W.shape != (ref[1], ref[1]):
                raise ValueError('hidden layers must share one width, got ' + str(layer.W.shape))


def depth_composition_probe(snapshots, zs=None, X=None):
    """
    propagate a fixed batch through each snapshot and evaluate the Stieltjes transform of
    every hidden layer's post-activation Gram matrix (1/m) A^T A over the m batch rows

    :param snapshots: list of GpfNetwork
    :param zs: complex grid, default_z_grid() when None
    :param X: input batch, rows are samples, probe_batch() when None

    :return: (stieltjes table, contraction table); the latter holds sup_z |s_l - s_{l-1}| per depth >= 2
    """
    _check_snapshots(snapshots)
    zs = default_z_grid() if zs is None else np.asarray(zs, dtype=complex)
    X = probe_batch() if X is None else np.asarray(X, dtype=float)
    m = X.shape[0]
    s_rows, c_rows = [], []
    for k, net in enumerate(snapshots):
        prev = None
        for depth, A in enumerate(hidden_activations(net, X), start=1):
            s = stieltjes_grid(gram_esd(A, m), zs)
            for z, sv in zip(zs, s):
                s_rows.append({'snapshot': k, 'depth': depth, 're_z': z.real, 'im_z': z.imag,
                               're_s': sv.real, 'im_s': sv.imag})
            if prev is not None:
                c_rows.append({'snapshot': k, 'depth': depth, 'sup_diff': float(np.max(np.abs(s - prev)))})
            prev = s
    s_table = pd.DataFrame(s_rows, columns=['snapshot', 'depth', 're_z', 'im_z', 're_s', 'im_s'])
    c_table = pd.DataFrame(c_rows, columns=['snapshot', 'depth', 'sup_diff'])
    return(s_table, c_table)


def frozen_spectra_match(before, after) -> dict:
    """
    for layers frozen in both networks, whether their weight spectra are bit-identical

    :return: {layer index: bool}
    """
    out = {}
    for i, (la, lb) in enumerate(zip(before.layers, after.layers)):
        if la.frozen and lb.frozen:
            out[i] = bool(np.array_equal(weight_esd(la.W).values, weight_esd(lb.W).values))
    return(out)
