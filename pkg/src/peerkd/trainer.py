"""Co-training orchestration.

Builds the peer topology (mutual for two networks, one-way cyclic for
three or more), runs the two-phase per-batch optimization, dispatches the
baseline methods, evaluates with average-softmax ensembling, and drives
full experiments with CSV metrics and binary checkpoints.

Per batch the full method runs one inference per network and two
optimizations: phase A steps every network synchronously on cross-entropy
plus the peer mimicry term, then phase B reuses the same feature maps to
step each edge's discriminator on the least-squares real/fake objective and
each extractor (plus transfer layer) on the fooling objective, under a
separate Adam with its own schedule. The fooling gradient is taken against
the discriminator as it stood before its update in the same batch.
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .blocks import build_discriminator, build_network, build_transfer_layer
from .checkpoint import load_entries, save_entries
from .data import (Dataset, RunConfig, batches, channel_stats, load_idx,
                   sequential_batches, standardize, synth_blobs)
from .errors import ConfigError, DataError, NonFiniteError
from .optim import Adam, SGDMomentum, lr_at
from .tensor import Tensor, backward, no_grad

CSV_HEADER = "epoch,net_id,split,loss_ce,loss_kl,loss_g,loss_d,top1,ens_top1,lr_logit,lr_adv"


def _child_seed(seed, *tags):
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class StepRecord:
    """Per-network losses and training-batch accuracy for one step."""

    net_id: int
    loss_ce: float
    loss_kl: float | None = None
    loss_g: float | None = None
    loss_d: float | None = None
    top1: float | None = None


@dataclass
class DistillPlan:
    method: str
    nets: list
    edges: list  # directed (src, dst) pairs, 0-indexed
    discriminators: dict  # edge index -> Discriminator
    transfer_layers: dict  # edge index -> TransferLayer | IdentityTransfer
    temperature: float
    epochs: int
    batch_size: int
    seed: int
    logit_opt: SGDMomentum
    adv_opt: Adam | None
    config: RunConfig
    frozen: set = field(default_factory=set)
    disc_param_names: dict = field(default_factory=dict)
    gen_param_names: dict = field(default_factory=dict)

    def incoming(self, k: int):
        return [src for src, dst in self.edges if dst == k]


def _prefixed(prefix, params):
    return {f"{prefix}/{name}": p for name, p in params.items()}


def build_plan(config: RunConfig) -> DistillPlan:
    config.validate()
    archs = config.resolved_archs()
    k = len(archs)
    nets = [build_network(arch, config.num_classes, _child_seed(config.seed, 0, i))
            for i, arch in enumerate(archs)]
    edges = [] if k == 1 else [(i, (i + 1) % k) for i in range(k)]

    frozen = set()
    if config.method == "l1_kd_offline":
        frozen.add(1)
        teacher_entries = load_entries(config.teacher_checkpoint)
        _load_net_entries(nets[1], teacher_entries, "net0/")
        nets[1].eval()

    adversarial = config.method == "afd" and config.adversarial
    needs_transfer = adversarial or config.method in ("l1", "l1_kd", "l1_kd_offline")
    discriminators, transfer_layers = {}, {}
    for e, (src, dst) in enumerate(edges):
        if adversarial:
            discriminators[e] = build_discriminator(
                nets[src].feature_channels, config.disc_width, _child_seed(config.seed, 1, e))
        if needs_transfer:
            transfer_layers[e] = build_transfer_layer(
                nets[dst].feature_channels, nets[src].feature_channels,
                _child_seed(config.seed, 2, e))

    logit_params = {}
    for i, net in enumerate(nets):
        if i in frozen:
            continue
        logit_params.update(_prefixed(f"net{i}", net.params()))
    if config.method in ("l1", "l1_kd", "l1_kd_offline"):
        # alignment-path adapters train with the task loss
        for e, tr in transfer_layers.items():
            if edges[e][1] not in frozen:
                logit_params.update(_prefixed(f"transfer{e}", tr.params()))
    logit_opt = SGDMomentum(logit_params, config.lr_logit, config.momentum,
                            config.weight_decay_logit)

    adv_opt = None
    disc_param_names, gen_param_names = {}, {}
    if adversarial:
        adv_params = {}
        for i, net in enumerate(nets):
            adv_params.update(_prefixed(f"net{i}", net.extractor_params()))
        for e in range(len(edges)):
            adv_params.update(_prefixed(f"disc{e}", discriminators[e].params()))
            adv_params.update(_prefixed(f"transfer{e}", transfer_layers[e].params()))
        adv_opt = Adam(adv_params, config.lr_adv, weight_decay=config.weight_decay_adv)
        for e, (src, dst) in enumerate(edges):
            disc_param_names[e] = list(_prefixed(f"disc{e}", discriminators[e].params()))
            gen_param_names[e] = (list(_prefixed(f"net{dst}", nets[dst].extractor_params()))
                                  + list(_prefixed(f"transfer{e}", transfer_layers[e].params())))

    return DistillPlan(
        method=config.method, nets=nets, edges=edges,
        discriminators=discriminators, transfer_layers=transfer_layers,
        temperature=config.temperature, epochs=config.epochs,
        batch_size=config.batch_size, seed=config.seed,
        logit_opt=logit_opt, adv_opt=adv_opt, config=config, frozen=frozen,
        disc_param_names=disc_param_names, gen_param_names=gen_param_names,
    )


@contextlib.contextmanager
def _frozen_params(module):
    """Treat a module's parameters as constants inside the block."""
    params = list(module.params().values())
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, was in zip(params, saved):
            p.requires_grad = was


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is non-finite ({value}); aborting step")
    return value


def _batch_top1(logits: Tensor, y: np.ndarray) -> float:
    return float((logits.data.argmax(axis=1) == y).mean())


def forward_all(plan: DistillPlan, x: np.ndarray):
    """One inference per network; features and logits come from the same pass."""
    xt = Tensor(x)
    feats, logits = [], []
    for i, net in enumerate(plan.nets):
        if i in plan.frozen:
            with no_grad():
                f, z = net.forward(xt)
        else:
            f, z = net.forward(xt)
        feats.append(f)
        logits.append(z)
    return feats, logits


def _mean_losses(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    if len(terms) > 1:
        total = total * (1.0 / len(terms))
    return total


def afd_logit_phase(plan: DistillPlan, y: np.ndarray, feats, logits):
    """Phase A: cross-entropy + incoming-edge mimicry, synchronous SGD step."""
    plan.logit_opt.zero_grad()
    records = []
    for k in range(len(plan.nets)):
        if k in plan.frozen:
            continue
        ce = L.cross_entropy(y, logits[k])
        incoming = plan.incoming(k)
        rec = StepRecord(net_id=k, loss_ce=_finite(ce.item(), f"loss_ce[net{k}]"),
                         top1=_batch_top1(logits[k], y))
        loss = ce
        if incoming:
            kl = _mean_losses([L.kl_mimicry(logits[src], logits[k], plan.temperature)
                               for src in incoming])
            rec.loss_kl = _finite(kl.item(), f"loss_kl[net{k}]")
            loss = loss + kl
        backward(loss)
        records.append(rec)
    plan.logit_opt.step()
    return records


def afd_adversarial_phase(plan: DistillPlan, feats, records=None):
    """Phase B: per edge, discriminator step then extractor+transfer step.

    Both scoring passes for the fooling loss run before the discriminator
    moves, so the generator gradient is taken against the pre-update
    discriminator. Features come detached into the discriminator loss;
    the discriminator is frozen inside the fooling loss.
    """
    by_net = {r.net_id: r for r in records or []}
    plan.adv_opt.zero_grad()
    for e, (src, dst) in enumerate(plan.edges):
        disc = plan.discriminators[e]
        transfer = plan.transfer_layers[e]
        own = transfer.forward(feats[dst])
        d_peer = disc.forward(feats[src].detach())
        d_own_detached = disc.forward(own.detach())
        with _frozen_params(disc):
            d_own_live = disc.forward(own)

        d_loss = L.lsgan_d_loss(d_peer, d_own_detached)
        d_val = _finite(d_loss.item(), f"loss_d[edge{e}]")
        backward(d_loss)
        plan.adv_opt.step(plan.disc_param_names[e])

        g_loss = L.lsgan_g_loss(d_own_live)
        g_val = _finite(g_loss.item(), f"loss_g[edge{e}]")
        backward(g_loss)
        plan.adv_opt.step(plan.gen_param_names[e])

        if dst in by_net:
            by_net[dst].loss_d = d_val
            by_net[dst].loss_g = g_val


def afd_train_step(plan: DistillPlan, x: np.ndarray, y: np.ndarray):
    feats, logits = forward_all(plan, x)
    records = afd_logit_phase(plan, y, feats, logits)
    if plan.adv_opt is not None:
        afd_adversarial_phase(plan, feats, records)
    return records


def _dml_step(plan, x, y):
    xt = Tensor(x)
    feats, logits = forward_all(plan, x)
    records = []
    for k in range(len(plan.nets)):
        if k == 0:
            own_logits = logits[k]
        else:
            _, own_logits = plan.nets[k].forward(xt)  # fresh pass after peers moved
        ce = L.cross_entropy(y, own_logits)
        kl = _mean_losses([L.kl_mimicry(logits[src], own_logits, plan.temperature)
                           for src in plan.incoming(k)])
        rec = StepRecord(net_id=k, loss_ce=_finite(ce.item(), f"loss_ce[net{k}]"),
                         loss_kl=_finite(kl.item(), f"loss_kl[net{k}]"),
                         top1=_batch_top1(own_logits, y))
        plan.logit_opt.zero_grad()
        backward(ce + kl)
        plan.logit_opt.step()
        records.append(rec)
    return records


def _kd_ensemble_step(plan, x, y):
    feats, logits = forward_all(plan, x)
    target = np.mean([L.softmax_np(z.data, plan.temperature) for z in logits], axis=0)
    plan.logit_opt.zero_grad()
    records = []
    for k, z in enumerate(logits):
        ce = L.cross_entropy(y, z)
        kl = L.kl_probs_mimicry(target, z, plan.temperature)
        records.append(StepRecord(net_id=k, loss_ce=_finite(ce.item(), f"loss_ce[net{k}]"),
                                  loss_kl=_finite(kl.item(), f"loss_kl[net{k}]"),
                                  top1=_batch_top1(z, y)))
        backward(ce + kl)
    plan.logit_opt.step()
    return records


def _l1_step(plan, x, y, with_kd):
    feats, logits = forward_all(plan, x)
    plan.logit_opt.zero_grad()
    records = []
    for k in range(len(plan.nets)):
        if k in plan.frozen:
            continue
        ce = L.cross_entropy(y, logits[k])
        rec = StepRecord(net_id=k, loss_ce=_finite(ce.item(), f"loss_ce[net{k}]"),
                         top1=_batch_top1(logits[k], y))
        loss = ce
        incoming = plan.incoming(k)
        if incoming:
            if with_kd:
                kl = _mean_losses([L.kl_mimicry(logits[src], logits[k], plan.temperature)
                                   for src in incoming])
                rec.loss_kl = _finite(kl.item(), f"loss_kl[net{k}]")
                loss = loss + kl
            align_terms = []
            for src in incoming:
                e = next(i for i, (s, d) in enumerate(plan.edges) if s == src and d == k)
                own = plan.transfer_layers[e].forward(feats[k])
                align_terms.append(L.l1_alignment(own, feats[src]))
            loss = loss + _mean_losses(align_terms)
        backward(loss)
        records.append(rec)
    plan.logit_opt.step()
    return records


def _vanilla_step(plan, x, y):
    feats, logits = forward_all(plan, x)
    plan.logit_opt.zero_grad()
    records = []
    for k, z in enumerate(logits):
        ce = L.cross_entropy(y, z)
        records.append(StepRecord(net_id=k, loss_ce=_finite(ce.item(), f"loss_ce[net{k}]"),
                                  top1=_batch_top1(z, y)))
        backward(ce)
    plan.logit_opt.step()
    return records


def baseline_train_step(plan: DistillPlan, x: np.ndarray, y: np.ndarray):
    if plan.method == "dml":
        return _dml_step(plan, x, y)
    if plan.method == "kd_ensemble":
        return _kd_ensemble_step(plan, x, y)
    if plan.method == "l1":
        return _l1_step(plan, x, y, with_kd=False)
    if plan.method in ("l1_kd", "l1_kd_offline"):
        return _l1_step(plan, x, y, with_kd=True)
    if plan.method == "vanilla":
        return _vanilla_step(plan, x, y)
    raise ConfigError(f"{plan.method!r} is not a baseline method")


def train_step(plan: DistillPlan, x: np.ndarray, y: np.ndarray):
    if plan.method == "afd":
        return afd_train_step(plan, x, y)
    return baseline_train_step(plan, x, y)


def evaluate(nets, dataset: Dataset, batch_size: int = 256):
    """Per-net top-1 and average-softmax ensemble top-1, in eval mode."""
    if dataset.n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    saved_modes = [net.training for net in nets]
    for net in nets:
        net.eval()
    correct = np.zeros(len(nets), dtype=np.int64)
    ens_correct = 0
    with no_grad():
        for x, y in sequential_batches(dataset, batch_size):
            xt = Tensor(x)
            prob_sum = None
            for i, net in enumerate(nets):
                _, z = net.forward(xt)
                probs = L.softmax_np(z.data, 1.0)
                correct[i] += int((probs.argmax(axis=1) == y).sum())
                prob_sum = probs if prob_sum is None else prob_sum + probs
            ens_correct += int(((prob_sum / len(nets)).argmax(axis=1) == y).sum())
    for net, mode in zip(nets, saved_modes):
        net.training = mode
    per_net = [float(c) / dataset.n for c in correct]
    return per_net, float(ens_correct) / dataset.n


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def _load_net_entries(net, entries, prefix):
    for name, p in net.params().items():
        arr = entries[prefix + name]
        if arr.shape != p.data.shape:
            raise ConfigError(
                f"checkpoint entry {prefix + name} has shape {arr.shape}, "
                f"expected {p.data.shape}"
            )
        p.data = arr.copy()
    for name, buf in net.buffers().items():
        buf[:] = entries[prefix + name]


def plan_state_entries(plan: DistillPlan, epoch: int, mean: np.ndarray, std: np.ndarray):
    entries = {}
    for i, net in enumerate(plan.nets):
        for name, p in net.params().items():
            entries[f"net{i}/{name}"] = p.data
        for name, buf in net.buffers().items():
            entries[f"net{i}/{name}"] = buf
    for e, disc in plan.discriminators.items():
        for name, p in disc.params().items():
            entries[f"disc{e}/{name}"] = p.data
        for name, buf in disc.buffers().items():
            entries[f"disc{e}/{name}"] = buf
    for e, tr in plan.transfer_layers.items():
        for name, p in tr.params().items():
            entries[f"transfer{e}/{name}"] = p.data
        for name, buf in tr.buffers().items():
            entries[f"transfer{e}/{name}"] = buf
    for name, arr in plan.logit_opt.state_arrays().items():
        entries[f"opt_logit/{name}"] = arr
    if plan.adv_opt is not None:
        for name, arr in plan.adv_opt.state_arrays().items():
            entries[f"opt_adv/{name}"] = arr
    entries["meta/epoch"] = np.asarray([float(epoch)], dtype=np.float32)
    entries["data/mean"] = mean
    entries["data/std"] = std
    return entries


def restore_plan(plan: DistillPlan, entries: dict):
    for i, net in enumerate(plan.nets):
        _load_net_entries(net, entries, f"net{i}/")
    for e, disc in plan.discriminators.items():
        for name, p in disc.params().items():
            p.data = entries[f"disc{e}/{name}"].copy()
        for name, buf in disc.buffers().items():
            buf[:] = entries[f"disc{e}/{name}"]
    for e, tr in plan.transfer_layers.items():
        for name, p in tr.params().items():
            p.data = entries[f"transfer{e}/{name}"].copy()
        for name, buf in tr.buffers().items():
            buf[:] = entries[f"transfer{e}/{name}"]
    plan.logit_opt.load_state_arrays(
        {name[len("opt_logit/"):]: arr for name, arr in entries.items()
         if name.startswith("opt_logit/")})
    if plan.adv_opt is not None:
        plan.adv_opt.load_state_arrays(
            {name[len("opt_adv/"):]: arr for name, arr in entries.items()
             if name.startswith("opt_adv/")})
    return int(entries["meta/epoch"][0])


def save_plan_checkpoint(plan, path, epoch, mean, std):
    save_entries(path, plan_state_entries(plan, epoch, mean, std))


# ---------------------------------------------------------------------------
# full experiment driver
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _fmt_lr(value) -> str:
    return f"{value:.8g}"


def _load_raw_data(config: RunConfig):
    if config.data_source == "idx":
        train = load_idx(config.train_images, config.train_labels)
        test = load_idx(config.test_images, config.test_labels)
        train.split, test.split = "train", "test"
        return train, test
    train = synth_blobs(config.num_classes, config.per_class_train, config.image_size,
                        config.noise_std, config.data_seed, "train")
    test = synth_blobs(config.num_classes, config.per_class_test, config.image_size,
                       config.noise_std, config.data_seed + 1, "test")
    return train, test


def run_experiment(config: RunConfig, resume_from=None):
    """Train per config; returns the metric rows written to metrics.csv.

    Writes one train row per network per epoch (mean step losses, running
    train accuracy) and one test row per network per epoch (top-1 plus the
    shared ensemble top-1), preceded by an epoch-0 evaluation. Checkpoints
    land at each logit-phase milestone and at the end.
    """
    config.validate()
    raw_train, raw_test = _load_raw_data(config)
    mean, std = channel_stats(raw_train)
    plan = build_plan(config)
    start_epoch = 0
    if resume_from is not None:
        entries = load_entries(resume_from)
        start_epoch = restore_plan(plan, entries)
        mean, std = entries["data/mean"], entries["data/std"]
    train_ds = standardize(raw_train, mean, std)
    test_ds = standardize(raw_test, mean, std)

    os.makedirs(config.out_dir, exist_ok=True)
    csv_path = os.path.join(config.out_dir, "metrics.csv")
    append = resume_from is not None and os.path.exists(csv_path)
    rows = []

    def lr_pair(epoch):
        lr_l = lr_at(epoch, config.lr_logit, config.milestones_logit, config.lr_factor)
        lr_a = lr_at(epoch, config.lr_adv, config.milestones_adv, config.lr_factor)
        return lr_l, lr_a

    with open(csv_path, "a" if append else "w") as out:
        if not append:
            out.write(CSV_HEADER + "\n")

        def emit(epoch, net_id, split, ce, kl, g, d, top1, ens, lr_l, lr_a):
            row = {"epoch": epoch, "net_id": net_id, "split": split,
                   "loss_ce": ce, "loss_kl": kl, "loss_g": g, "loss_d": d,
                   "top1": top1, "ens_top1": ens, "lr_logit": lr_l, "lr_adv": lr_a}
            rows.append(row)
            out.write(f"{epoch},{net_id},{split},{_fmt(ce)},{_fmt(kl)},{_fmt(g)},"
                      f"{_fmt(d)},{_fmt(top1)},{_fmt(ens)},{_fmt_lr(lr_l)},{_fmt_lr(lr_a)}\n")

        def emit_eval(epoch):
            lr_l, lr_a = lr_pair(max(epoch - 1, 0))
            per_net, ens = evaluate(plan.nets, test_ds, config.batch_size)
            for k, acc in enumerate(per_net):
                emit(epoch, k, "test", None, None, None, None, acc, ens, lr_l, lr_a)

        if start_epoch == 0:
            emit_eval(0)

        for epoch in range(start_epoch, config.epochs):
            lr_l, lr_a = lr_pair(epoch)
            plan.logit_opt.lr = lr_l
            if plan.adv_opt is not None:
                plan.adv_opt.lr = lr_a
            sums, counts = {}, {}
            for x, y in batches(train_ds, config.batch_size, config.seed, epoch):
                for rec in train_step(plan, x, y):
                    acc = sums.setdefault(rec.net_id, [0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0])
                    acc[0] += rec.loss_ce
                    if rec.loss_kl is not None:
                        acc[1] += rec.loss_kl
                        acc[5] = 1
                    if rec.loss_g is not None:
                        acc[2] += rec.loss_g
                        acc[6] = 1
                    if rec.loss_d is not None:
                        acc[3] += rec.loss_d
                        acc[7] = 1
                    acc[4] += rec.top1
                    counts[rec.net_id] = counts.get(rec.net_id, 0) + 1
            for k in sorted(sums):
                n = counts[k]
                s = sums[k]
                emit(epoch + 1, k, "train", s[0] / n,
                     s[1] / n if s[5] else None,
                     s[2] / n if s[6] else None,
                     s[3] / n if s[7] else None,
                     s[4] / n, None, lr_l, lr_a)
            per_net, ens = evaluate(plan.nets, test_ds, config.batch_size)
            for k, acc in enumerate(per_net):
                emit(epoch + 1, k, "test", None, None, None, None, acc, ens, lr_l, lr_a)
            if (epoch + 1) in config.milestones_logit:
                save_plan_checkpoint(
                    plan, os.path.join(config.out_dir, f"checkpoint_ep{epoch + 1}.afdk"),
                    epoch + 1, mean, std)

    save_plan_checkpoint(plan, os.path.join(config.out_dir, "checkpoint_final.afdk"),
                         config.epochs, mean, std)
    return rows
