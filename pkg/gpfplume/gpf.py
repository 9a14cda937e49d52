"""
Grow-Prune-Freeze network.

A dense ReLU MLP (22 -> 64 x L -> 6) of float64 ``torch.nn.Linear`` layers. Gradients come
from autograd and updates from ``torch.optim.Adam``. Every layer carries a torch pruning mask
(``weight_orig`` / ``weight_mask``), so a pruned weight reads 0 in every forward pass.

Each weight carries a belief value h in [0, 1] that grows while |w| stays above a
magnitude threshold; weights with low belief and small magnitude are masked (pruned),
hidden layers whose weights stop moving are frozen (h = 1, no more updates), and a new
hidden layer is inserted before the output map when the validation loss plateaus.
Beliefs and stability windows are numpy arrays kept beside each layer.
"""
from dataclasses import dataclass, field
from typing import List, Optional
import copy
import hashlib
import logging
import numpy as np
import pandas as pd
import torch
from torch.nn.utils import prune as torch_prune

from gpfplume.config import GpfConfig, validate_gpf_config

logger = logging.getLogger('gpfplume')

BELIEF_CEILING = np.nextafter(1.0, 0.0)
DTYPE = torch.float64


class GpfLayer:
    """
    one dense layer z = a @ W.T + b with W of shape (out, in)

    W and b are numpy views of the torch parameters, writing into them changes the layer.
    """

    def __init__(self, uid, W, b, h=None, mask=None, frozen=False, stab_min=None, stab_max=None,
                 stable_since=None):
        W = np.array(W, dtype=float)
        fan_out, fan_in = W.shape
        self.uid = int(uid)
        self.linear = torch.nn.Linear(fan_in, fan_out, dtype=DTYPE)
        with torch.no_grad():
            self.linear.weight.copy_(torch.as_tensor(W))
            self.linear.bias.copy_(torch.as_tensor(np.array(b, dtype=float)))
        keep = np.ones(W.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        torch_prune.custom_from_mask(self.linear, 'weight', torch.as_tensor(keep, dtype=DTYPE))
        self._clear_masked()
        self.h = np.zeros(W.shape) if h is None else np.array(h, dtype=float)
        self.stab_min = stab_min
        self.stab_max = stab_max
        self.stable_since = stable_since
        self.frozen = frozen

    def _clear_masked(self):
        with torch.no_grad():
            self.linear.weight_orig.mul_(self.linear.weight_mask)

    @property
    def W(self) -> np.ndarray:
        return(self.linear.weight_orig.detach().numpy())

    @W.setter
    def W(self, value):
        with torch.no_grad():
            self.linear.weight_orig.copy_(torch.as_tensor(np.array(value, dtype=float)))

    @property
    def b(self) -> np.ndarray:
        return(self.linear.bias.detach().numpy())

    @b.setter
    def b(self, value):
        with torch.no_grad():
            self.linear.bias.copy_(torch.as_tensor(np.array(value, dtype=float)))

    @property
    def mask(self) -> np.ndarray:
        """ bool copy, True = active """
        return(self.linear.weight_mask.detach().numpy().astype(bool))

    @property
    def frozen(self) -> bool:
        return(not self.linear.bias.requires_grad)

    @frozen.setter
    def frozen(self, value):
        self.linear.requires_grad_(not value)

    @property
    def shape(self):
        return(tuple(self.linear.weight_orig.shape))

    def parameters(self):
        return([self.linear.weight_orig, self.linear.bias])

    def restrict(self, keep):
        """ AND a new keep-mask into the pruning mask, dropped weights are set to 0 """
        torch_prune.custom_from_mask(self.linear, 'weight', torch.as_tensor(keep, dtype=DTYPE))
        self._clear_masked()

    def retained(self) -> float:
        return(float(np.mean(self.mask)))


@dataclass
class PlateauTracker:
    best: float = float('inf')
    last_improve: int = 0
    last_event: int = 0
    last_prune: Optional[int] = None


@dataclass
class GpfNetwork:
    layers: List[GpfLayer]
    config: GpfConfig
    rng: np.random.Generator
    tracker: PlateauTracker = field(default_factory=PlateauTracker)
    next_uid: int = 0
    version: int = 0          # bumped by every change, forward caches check it
    structure: int = 0        # bumped by grow, prune and freeze

    @property
    def hidden_layers(self) -> int:
        return(len(self.layers) - 1)

    def output_index(self) -> int:
        return(len(self.layers) - 1)


@dataclass
class ForwardCache:
    version: int
    output: torch.Tensor     # q with its autograd graph
    squeeze: bool


@dataclass
class AdamState:
    """ Adam hyperparameters and per-layer moments, the form a checkpoint stores """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)    # uid -> (mW, mb)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)    # uid -> update count

    @classmethod
    def from_config(cls, config: GpfConfig):
        return(cls(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps))

    def moments(self, layer: GpfLayer):
        if layer.uid not in self.m:
            self.m[layer.uid] = (np.zeros(layer.shape), np.zeros(layer.shape[0]))
            self.v[layer.uid] = (np.zeros(layer.shape), np.zeros(layer.shape[0]))
            self.t[layer.uid] = 0
        return(self.m[layer.uid], self.v[layer.uid])


class GpfOptimizer:
    """
    torch.optim.Adam over one network, a parameter group per layer.

    Layers added by growth join on the next step. After a prune the moments of the dropped
    weights are cleared, so with their zero gradient they stay exactly 0.
    """

    def __init__(self, net: GpfNetwork, state: AdamState = None):
        if state is None:
            state = AdamState.from_config(net.config)
        self.net = net
        self.hyper = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
        self.opt = None
        self.uids = set()
        self.synced = None
        self._sync(state)

    def _register(self, layer: GpfLayer):
        params = layer.parameters()
        if self.opt is None:
            self.opt = torch.optim.Adam(params, lr=self.hyper.lr, betas=(self.hyper.beta1, self.hyper.beta2),
                                        eps=self.hyper.eps)
        else:
            self.opt.add_param_group({'params': params})
        self.uids.add(layer.uid)

    def _load(self, layer: GpfLayer, state: AdamState):
        if state.t.get(layer.uid, 0) == 0:
            return
        (mW, mb), (vW, vb) = state.moments(layer)
        for p, m, v in zip(layer.parameters(), (mW, mb), (vW, vb)):
            self.opt.state[p] = {'step': torch.tensor(float(state.t[layer.uid])),
                                 'exp_avg': torch.tensor(m, dtype=DTYPE),
                                 'exp_avg_sq': torch.tensor(v, dtype=DTYPE)}

    def _sync(self, state=None):
        for layer in self.net.layers:
            if layer.uid not in self.uids:
                self._register(layer)
                if state is not None:
                    self._load(layer, state)
            moments = self.opt.state.get(layer.linear.weight_orig)
            if moments:
                keep = layer.linear.weight_mask
                moments['exp_avg'].mul_(keep)
                moments['exp_avg_sq'].mul_(keep)
        self.synced = self.net.structure

    def step(self, scale=1.0):
        """ Adam step on the accumulated gradients, scaled first (1 / count averages them) """
        if self.synced != self.net.structure:
            self._sync()
        if scale != 1.0:
            for group in self.opt.param_groups:
                for p in group['params']:
                    if p.grad is not None:
                        p.grad.mul_(scale)
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)
        self.net.version += 1

    def export(self) -> AdamState:
        """ numpy copy of the current moments, keyed by layer uid """
        out = AdamState(lr=self.hyper.lr, beta1=self.hyper.beta1, beta2=self.hyper.beta2, eps=self.hyper.eps)
        for layer in self.net.layers:
            weight, bias = layer.parameters()
            sw, sb = self.opt.state.get(weight), self.opt.state.get(bias)
            if not sw or not sb:
                out.moments(layer)
                continue
            out.m[layer.uid] = (sw['exp_avg'].numpy().copy(), sb['exp_avg'].numpy().copy())
            out.v[layer.uid] = (sw['exp_avg_sq'].numpy().copy(), sb['exp_avg_sq'].numpy().copy())
            out.t[layer.uid] = int(sw['step'])
        return(out)


def kaiming_layer(uid, fan_in, fan_out, rng, episode=0) -> GpfLayer:
    """ He-normal weights, std sqrt(2 / fan_in), zero bias and zero belief """
    W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
    layer = GpfLayer(uid=uid, W=W, b=np.zeros(fan_out))
    reset_stability(layer, episode)
    return(layer)


def reset_stability(layer: GpfLayer, episode: int):
    layer.stab_min = layer.W.copy()
    layer.stab_max = layer.W.copy()
    layer.stable_since = np.full(layer.shape, episode, dtype=np.int64)


def build_network(config: GpfConfig = None, seed=0, hidden_layers=1) -> GpfNetwork:
    """
    fresh network with `hidden_layers` hidden layers of config.hidden_width units

    :param config: GpfConfig
    :param seed: int or Generator for the Kaiming draws (also used for grown layers)
    """
    if config is None:
        config = GpfConfig()
    validate_gpf_config(config)
    if not (1 <= hidden_layers <= config.max_hidden_layers):
        raise ValueError(f'hidden_layers must be in 1..{config.max_hidden_layers}')
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = [config.input_dim] + [config.hidden_width] * hidden_layers + [config.output_dim]
    layers = [kaiming_layer(i, widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]
    return(GpfNetwork(layers=layers, config=config, rng=rng, next_uid=len(layers)))


def _as_input(net: GpfNetwork, x):
    x = np.asarray(x, dtype=float)
    a = np.atleast_2d(x)
    fan_in = net.layers[0].shape[1]
    if a.ndim != 2 or a.shape[1] != fan_in:
        raise ValueError(f'input has shape {x.shape}, network expects {fan_in} features')
    return(torch.as_tensor(a), x.ndim == 1)


def _pass(net: GpfNetwork, a):
    last = net.output_index()
    for i, layer in enumerate(net.layers):
        a = layer.linear(a)
        if i != last:
            a = torch.relu(a)
    return(a)


def forward(net: GpfNetwork, x):
    """
    :param net: GpfNetwork
    :param x: (input_dim,) or (N, input_dim)

    :return: (q, ForwardCache), q is a numpy (output_dim,) or (N, output_dim)
    """
    a, squeeze = _as_input(net, x)
    out = _pass(net, a)
    q = out.detach().numpy().copy()
    return(q[0] if squeeze else q, ForwardCache(net.version, out, squeeze))


def q_values(net: GpfNetwork, x):
    """ forward without building a graph """
    a, squeeze = _as_input(net, x)
    with torch.no_grad():
        q = _pass(net, a).numpy()
    return(q[0] if squeeze else q)


def td_loss_grad(q, action, target):
    """
    loss 0.5 (q[a] - y)^2 on a single transition, and its gradient w.r.t. q

    :return: (loss, dL/dq)
    """
    grad = np.zeros_like(q)
    err = q[action] - target
    grad[action] = err
    return(0.5 * err * err, grad)


def gradients(net: GpfNetwork) -> list:
    """ accumulated (dW, db) per layer as numpy, zeros where nothing has been accumulated """
    out = []
    for layer in net.layers:
        weight, bias = layer.parameters()
        dW = np.zeros(layer.shape) if weight.grad is None else weight.grad.numpy().copy()
        db = np.zeros(layer.shape[0]) if bias.grad is None else bias.grad.numpy().copy()
        out.append((dW, db))
    return(out)


def compute_gradients(net: GpfNetwork, cache: ForwardCache, grad_out):
    """
    backprop dL/dq through the cached pass, adding into the parameter gradients.
    Masked entries and frozen layers come back as 0.

    :param grad_out: dL/dq, same shape as the q returned by forward
    :return: the accumulated gradients, see `gradients`
    """
    if cache.version != net.version:
        raise ValueError('stale forward cache: network changed since the forward pass')
    g = np.asarray(grad_out, dtype=float)
    cache.output.backward(torch.as_tensor(g[None, :] if cache.squeeze else g))
    return(gradients(net))


def apply_gradients(net: GpfNetwork, optimizer: GpfOptimizer, scale=1.0):
    """ one Adam step on every unfrozen layer, masked weights stay exactly 0 """
    if optimizer.net is not net:
        raise ValueError('optimizer belongs to another network')
    optimizer.step(scale)
    return(net)


def backward_and_step(net: GpfNetwork, cache: ForwardCache, grad_out, optimizer: GpfOptimizer):
    compute_gradients(net, cache, grad_out)
    return(apply_gradients(net, optimizer))


def batch_size(episode, val_loss, config: GpfConfig) -> int:
    """ max(1, round(base_batch_size * exp(-batch_decay * val_loss))) """
    if not np.isfinite(val_loss):
        raise ValueError('val_loss must be finite')
    return(max(1, int(round(config.base_batch_size * np.exp(-config.batch_decay * val_loss)))))


def gpf_enabled(net: GpfNetwork, episode) -> bool:
    return(episode >= net.config.enable_patience)


def update_beliefs(net: GpfNetwork, episode=None):
    """
    h += belief_step for every active weight with |w| > belief_magnitude, the rest lose
    belief_decay of their belief. Clamped just below 1 on unfrozen layers.
    """
    cfg = net.config
    for layer in net.layers:
        if layer.frozen:
            layer.h = np.ones(layer.shape)
            continue
        above = (np.abs(layer.W) > cfg.belief_magnitude) & layer.mask
        h = np.where(above, layer.h + cfg.belief_step, layer.h * (1.0 - cfg.belief_decay))
        layer.h = np.minimum(h, BELIEF_CEILING)
    return(net)


def update_stability(net: GpfNetwork, episode: int):
    """
    per weight, keep min and max since the window started; a weight whose spread reaches
    the freeze threshold starts a new window at this episode
    """
    band = net.config.freeze_threshold
    for layer in net.layers:
        if layer.frozen:
            continue
        W = layer.W
        lo = np.minimum(layer.stab_min, W)
        hi = np.maximum(layer.stab_max, W)
        moved = (hi - lo) >= band
        layer.stab_min = np.where(moved, W, lo)
        layer.stab_max = np.where(moved, W, hi)
        layer.stable_since = np.where(moved, episode, layer.stable_since)
    return(net)


def newest_hidden_index(net: GpfNetwork) -> int:
    return(net.output_index() - 1)


def prune_threshold(layer: GpfLayer, config: GpfConfig) -> float:
    if config.prune_magnitude is not None:
        return(config.prune_magnitude)
    active = np.abs(layer.W[layer.mask])
    if active.size == 0:
        return(0.0)
    return(float(np.percentile(active, config.prune_percentile)))


def prune(net: GpfNetwork, upto_layer=None) -> list:
    """
    mask weights with h < belief_prune_threshold and |w| under the prune cut in every unfrozen layer before `upto_layer`
    (default: the newest hidden layer). The output layer is never pruned.

    :return: retained fraction for every layer
    """
    cfg = net.config
    if upto_layer is None:
        upto_layer = newest_hidden_index(net)
    if upto_layer > len(net.layers):
        raise ValueError(f'network has {len(net.layers)} layers, cannot prune up to {upto_layer}')
    upto_layer = min(upto_layer, net.output_index())
    for layer in net.layers[:upto_layer]:
        if layer.frozen:
            continue
        cut = prune_threshold(layer, cfg)
        drop = (layer.h < cfg.belief_prune_threshold) & (np.abs(layer.W) < cut)
        layer.restrict(layer.mask & ~drop)
    net.version += 1
    net.structure += 1
    return([layer.retained() for layer in net.layers])


def grow(net: GpfNetwork, episode: int) -> GpfLayer:
    """ insert a Kaiming hidden layer with zero belief just before the output map """
    width = net.config.hidden_width
    layer = kaiming_layer(net.next_uid, width, width, net.rng, episode)
    net.next_uid += 1
    net.layers.insert(net.output_index(), layer)
    net.version += 1
    net.structure += 1
    return(layer)


def maybe_grow(net: GpfNetwork, val_loss, episode: int) -> bool:
    """
    record val_loss; grow when it has not improved by stagnation_threshold for grow_patience episodes
    since the last improvement or structural event, and depth allows it.
    """
    if not np.isfinite(val_loss):
        raise ValueError('val_loss must be finite')
    cfg = net.config
    tr = net.tracker
    if val_loss < tr.best - cfg.stagnation_threshold:
        tr.best = float(val_loss)
        tr.last_improve = episode
        return(False)
    if not gpf_enabled(net, episode):
        return(False)
    if net.hidden_layers >= cfg.max_hidden_layers:
        return(False)
    if episode - max(tr.last_improve, tr.last_event) < cfg.grow_patience:
        return(False)
    grow(net, episode)
    tr.best = float('inf')
    tr.last_event = episode
    logger.info(f'episode {episode}: grew layer {net.hidden_layers - 1} -> {net.hidden_layers}')
    return(True)


def maybe_freeze(net: GpfNetwork, episode: int) -> list:
    """
    freeze every unfrozen hidden layer in which at least freeze_fraction of the active weights
    have stayed inside the freeze threshold for freeze_patience episodes

    :return: indices of the layers frozen by this call
    """
    cfg = net.config
    if not gpf_enabled(net, episode):
        return([])
    frozen_now = []
    for i, layer in enumerate(net.layers[:net.output_index()]):
        if layer.frozen:
            continue
        mask = layer.mask
        n_active = int(mask.sum())
        if n_active == 0:
            frac = 1.0
        else:
            stable = ((episode - layer.stable_since) >= cfg.freeze_patience) & mask
            frac = stable.sum() / n_active
        if frac >= cfg.freeze_fraction:
            layer.frozen = True
            layer.h = np.ones(layer.shape)
            frozen_now.append(i)
    if frozen_now:
        net.version += 1
        net.structure += 1
        logger.info(f'episode {episode}: froze layers {frozen_now}')
    return(frozen_now)


def _prune_due(net: GpfNetwork, episode: int) -> bool:
    last = net.tracker.last_prune
    return(last is None or (episode - last) >= net.config.prune_patience)


def structural_step(net: GpfNetwork, val_loss, episode: int) -> list:
    """
    the checkpoint-time schedule: maybe grow, prune after a grow (or standalone when enabled),
    maybe freeze

    :return: event tags in order, subset of ['G', 'P', 'F']
    """
    events = []
    grew = maybe_grow(net, val_loss, episode)
    if grew:
        events.append('G')
    want_prune = grew or (net.config.standalone_prune and gpf_enabled(net, episode))
    if want_prune and _prune_due(net, episode) and newest_hidden_index(net) > 0:
        kept = prune(net)
        net.tracker.last_prune = episode
        events.append('P')
        logger.info(f'episode {episode}: pruned, kept {100.0 * retained_fraction(net):.1f}% of weights '
                    + str([round(k, 3) for k in kept]))
    if maybe_freeze(net, episode):
        events.append('F')
    if events:
        logger.info(f'episode {episode}: layers after {"".join(events)}\n'
                    + network_summary(net).to_string(index=False))
    return(events)


def retained_fraction(net: GpfNetwork) -> float:
    active = sum(int(layer.mask.sum()) for layer in net.layers)
    total = sum(layer.mask.size for layer in net.layers)
    return(active / total)


def network_summary(net: GpfNetwork) -> pd.DataFrame:
    rows = []
    for i, layer in enumerate(net.layers):
        fan_out, fan_in = layer.shape
        rows.append({'layer': i, 'fan_in': fan_in, 'fan_out': fan_out,
                     'retained': layer.retained(), 'frozen': layer.frozen,
                     'mean_belief': float(layer.h.mean())})
    return(pd.DataFrame(rows))


def layer_digest(layer: GpfLayer) -> str:
    """ sha256 over weights, bias and mask bytes """
    m = hashlib.sha256()
    m.update(np.ascontiguousarray(layer.W).tobytes())
    m.update(np.ascontiguousarray(layer.b).tobytes())
    m.update(np.packbits(layer.mask).tobytes())
    return(m.hexdigest())


def snapshot(net: GpfNetwork) -> GpfNetwork:
    """ independent deep copy, safe to hand to evaluation workers """
    return(copy.deepcopy(net))
