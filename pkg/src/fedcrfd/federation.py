"""Federated training engines: Fed-CRFD and the plain baselines.

Every engine draws its mini-batches from the same schedule, so engines that
reduce to one another (Fed-CRFD with all loss weights at zero and no fusion
versus FedAvg; FedAvg with one client versus centralized training) follow
identical parameter trajectories.

Per local epoch a client first runs all horizontal batches, then all
vertical batches. The vertical batches are aligned across clients: batch
``b`` holds the same (patient, slice) keys everywhere, and each vertical
step waits at a K-party barrier where the server returns the cross-client
consistency gradient for the client's invariant latent.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import nn
from .data import ClientData, FederationPartition, SliceSample
from .nn import ArchConfig, ModelParams
from .tensor import Parameter, Tensor, adam_step, add, backward, constant, scale, zero_grad


class RoundAborted(RuntimeError):
    pass


class BarrierTimeout(RoundAborted):
    pass


class KeyOrderError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, round_index: int, client: int, term: str):
        super().__init__(f"non-finite {term} at round {round_index}, client {client}")
        self.round_index = round_index
        self.client = client
        self.term = term


@dataclass
class FederationConfig:
    num_clients: int = 2
    rounds: int = 50
    local_epochs: int = 2
    lr: float = 1e-4
    batch_size: int = 16
    mu1: float = 0.01
    mu2: float = 0.01
    mu3: float = 0.01
    beta: float = 0.1
    measure: str = "l1"
    cap: float = 10.0
    use_fusion: bool = True
    enable_cross: bool = True
    joint_cross_gradient: bool = False
    seed: int = 0
    checkpoint_every: int = 10
    concurrent: bool = False
    barrier_timeout: float = 120.0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> "FederationConfig":
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds must be >= 0, local_epochs and batch_size >= 1")
        if min(self.mu1, self.mu2, self.mu3) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.measure not in nn.MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}")
        if not self.cap > 0:
            raise ValueError("cap must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = nn.arch_to_dict(self.arch)
        return d


# ---------------------------------------------------------------------------
# aggregation


def compute_weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("no clients")
    if (counts <= 0).any():
        raise ValueError(f"every client needs samples, got counts {counts.tolist()}")
    return counts / counts.sum()


def aggregate(param_sets: Sequence[dict[str, np.ndarray]], weights: Sequence[float]) -> dict[str, np.ndarray]:
    """Weighted sum of per-client parameter dicts.

    A single client is returned as an exact copy, so K = 1 introduces no
    rounding at all.
    """
    if len(param_sets) != len(weights) or not param_sets:
        raise ValueError("need one weight per parameter set")
    names = set(param_sets[0])
    for ps in param_sets[1:]:
        if set(ps) != names:
            raise KeyError(f"parameter name sets differ: {sorted(names ^ set(ps))}")
    out = {}
    for name in sorted(names):
        shape = np.shape(param_sets[0][name])
        if any(np.shape(ps[name]) != shape for ps in param_sets):
            raise ValueError(f"shape mismatch for {name}")
        if len(param_sets) == 1:
            out[name] = np.array(param_sets[0][name], dtype=np.float64)
            continue
        acc = np.zeros(shape)
        for ps, w in zip(param_sets, weights):
            acc += w * np.asarray(ps[name])
        out[name] = acc
    return out


def snapshot(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


# ---------------------------------------------------------------------------
# batch schedule


def _chunks(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def horizontal_schedule(n: int, cfg: FederationConfig, t: int, q: int, k: int) -> list[np.ndarray]:
    rng = np.random.default_rng([cfg.seed, t, q, k, 0x48])
    return _chunks(rng.permutation(n), cfg.batch_size)


def vertical_schedule(n: int, cfg: FederationConfig, t: int, q: int) -> list[np.ndarray]:
    # shared by all clients: no client index in the key
    rng = np.random.default_rng([cfg.seed, t, q, 0x56])
    return _chunks(rng.permutation(n), cfg.batch_size)


def stack_batch(samples: Sequence[SliceSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.x for s in samples])[:, None]
    y = np.stack([s.y for s in samples])[:, None]
    return x, y


# ---------------------------------------------------------------------------
# messages and server


@dataclass
class LatentExchange:
    direction: str
    kind: str
    client: int
    barrier: tuple
    payload: np.ndarray
    keys: tuple = ()
    label: int | None = None


class Server:
    """Holds the global model, the auxiliary classifier and the latent pool."""

    def __init__(self, cfg: FederationConfig, global_params: dict[str, np.ndarray], num_classes: int, classifier_seed: int | None = None):
        self.cfg = cfg
        self.global_params = global_params
        arch = dataclasses.replace(cfg.arch, num_modalities=num_classes)
        self.classifier = nn.init_classifier(arch, cfg.seed if classifier_seed is None else classifier_seed)
        self.num_classes = num_classes
        self.round = 0
        self.messages: Counter = Counter()
        self.aggregated_names: set[str] = set()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._pool: dict[tuple, dict[int, LatentExchange]] = {}
        self._replies: dict[tuple, dict[int, LatentExchange]] = {}
        self._aborted = False

    # auxiliary classification ------------------------------------------------

    def auxiliary(self, upload: LatentExchange) -> tuple[LatentExchange, float, int]:
        """Classify uploaded z^S, update C, return d(mu1 * L_aux)/dz^S.

        The classifier update is serialized; concurrent clients are applied
        in arrival order.
        """
        if upload.kind != "z_s" or upload.label is None:
            raise ValueError("auxiliary expects a labelled z_s upload")
        with self._lock:
            self.messages["upload:z_s"] += 1
            z = Tensor(upload.payload, requires_grad=True)
            target = nn.one_hot(upload.label, self.num_classes, rows=len(upload.payload))
            loss, logits = nn.aux_loss(self.classifier, z, target)
            correct = int((logits.data.argmax(axis=1) == upload.label).sum())
            grad = np.zeros_like(upload.payload)
            if self.cfg.mu1 > 0:
                backward(scale(loss, self.cfg.mu1))
                grad = z.grad.copy()
                adam_step(self.classifier.values(), self.cfg.lr)
            self.messages["return:z_s"] += 1
        reply = LatentExchange("gradient-return", "z_s", upload.client, upload.barrier, grad, upload.keys)
        return reply, loss.item(), correct

    # cross-client consistency ------------------------------------------------

    def cross_gradients(self, uploads: Sequence[LatentExchange]) -> tuple[list[LatentExchange], list[float]]:
        """Per-client L_cross and the gradient of mu3 * L_cross w.r.t. that client's z^I.

        Other clients' latents are constants unless ``joint_cross_gradient``
        is set, in which case each client receives the gradient of the summed
        objective.
        """
        keys = uploads[0].keys
        for u in uploads:
            if u.kind != "z_i":
                raise ValueError("cross exchange expects z_i uploads")
            if u.keys != keys:
                raise KeyOrderError(f"client {u.client} sent keys in a different order at {u.barrier}")
            if u.payload.shape != uploads[0].payload.shape:
                raise ValueError("z_i payload shapes differ between clients")
        measure, mu3 = self.cfg.measure, self.cfg.mu3
        losses, grads = [], []
        if self.cfg.joint_cross_gradient:
            zs = [Tensor(u.payload, requires_grad=True) for u in uploads]
            terms = [nn.cross_loss(zs[k], [z for i, z in enumerate(zs) if i != k], measure) for k in range(len(zs))]
            total = terms[0]
            for term in terms[1:]:
                total = add(total, term)
            backward(scale(total, mu3))
            losses = [t.item() for t in terms]
            grads = [z.grad.copy() for z in zs]
        else:
            for k, u in enumerate(uploads):
                z = Tensor(u.payload, requires_grad=True)
                others = [constant(o.payload) for i, o in enumerate(uploads) if i != k]
                loss = nn.cross_loss(z, others, measure)
                backward(scale(loss, mu3))
                losses.append(loss.item())
                grads.append(z.grad.copy())
        replies = [
            LatentExchange("gradient-return", "z_i", u.client, u.barrier, g, u.keys)
            for u, g in zip(uploads, grads)
        ]
        return replies, losses

    def exchange(self, upload: LatentExchange, num_clients: int, timeout: float) -> tuple[LatentExchange, float]:
        """K-party barrier: block until every client uploaded for this key."""
        with self._cond:
            if self._aborted:
                raise RoundAborted("round aborted")
            self.messages["upload:z_i"] += 1
            pool = self._pool.setdefault(upload.barrier, {})
            pool[upload.client] = upload
            if len(pool) == num_clients:
                ordered = [pool[k] for k in sorted(pool)]
                replies, losses = self.cross_gradients(ordered)
                self._replies[upload.barrier] = {r.client: (r, l) for r, l in zip(replies, losses)}
                del self._pool[upload.barrier]
                self._cond.notify_all()
            ok = self._cond.wait_for(
                lambda: self._aborted or upload.client in self._replies.get(upload.barrier, {}), timeout
            )
            if self._aborted:
                raise RoundAborted("round aborted")
            if not ok:
                self._aborted = True
                self._cond.notify_all()
                raise BarrierTimeout(f"client missing at barrier {upload.barrier}")
            replies = self._replies[upload.barrier]
            reply, loss = replies.pop(upload.client)
            if not replies:
                del self._replies[upload.barrier]
            self.messages["return:z_i"] += 1
            return reply, loss

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()

    def reset_barriers(self) -> None:
        with self._cond:
            self._pool.clear()
            self._replies.clear()
            self._aborted = False

    # aggregation -------------------------------------------------------------

    def aggregate(self, uploads: Sequence[dict[str, np.ndarray]], counts: Sequence[int]) -> dict[str, np.ndarray]:
        for u in uploads:
            if set(u) != set(self.global_params):
                raise KeyError("uploaded parameter names differ from the global model")
            self.aggregated_names |= set(u)
        self.messages["upload:model"] += len(uploads)
        self.global_params = aggregate(uploads, compute_weights(counts))
        return self.global_params


# ---------------------------------------------------------------------------
# clients


@dataclass
class _Forward:
    x: Tensor
    y: np.ndarray
    keys: tuple
    recon: Tensor
    l_recon: Tensor
    z_i: Tensor
    z_s: Tensor
    l_intra: Tensor


@dataclass
class _Tally:
    recon: list[float] = field(default_factory=list)
    aux: list[float] = field(default_factory=list)
    intra: list[float] = field(default_factory=list)
    cross: list[float] = field(default_factory=list)
    correct: int = 0
    seen: int = 0

    def summary(self, t: int, k: int) -> dict:
        def avg(v):
            return float(np.mean(v)) if v else None
        return {
            "round": t,
            "client": k,
            "l_recon": avg(self.recon),
            "l_aux": avg(self.aux),
            "l_intra": avg(self.intra),
            "l_cross": avg(self.cross),
            "aux_accuracy": self.correct / self.seen if self.seen else None,
        }


def _check_finite(value: float, t: int, k: int, term: str) -> None:
    if not math.isfinite(value):
        raise NumericError(t, k, term)


class Client:
    """One Fed-CRFD participant: local model, optimizer state and data."""

    def __init__(self, data: ClientData, model: ModelParams, cfg: FederationConfig):
        self.data = data
        self.index = data.index
        self.label = data.modality
        self.model = model
        self.cfg = cfg
        self.tally = _Tally()

    @property
    def n_samples(self) -> int:
        return self.data.n_samples

    def receive(self, global_params: dict[str, np.ndarray]) -> None:
        # E^S is not part of the broadcast and is never touched here
        self.model.load_aggregable(global_params)

    def upload(self) -> dict[str, np.ndarray]:
        return snapshot(self.model.aggregable())

    def forward(self, samples: Sequence[SliceSample], keys: tuple = ()) -> _Forward:
        cfg, arch = self.cfg, self.cfg.arch
        xb, yb = stack_batch(samples)
        x = constant(xb)
        feat_i, skips, z_i = nn.encode_invariant(self.model, x, arch)
        feat_s, z_s = nn.encode_specific(self.model, x, arch)
        recon = nn.fuse_and_decode(self.model, feat_i, feat_s if cfg.use_fusion else None, skips, arch, cfg.use_fusion, residual=x)
        l_recon = nn.recon_loss(recon, constant(yb))
        l_intra = nn.intra_loss(z_i, z_s, cfg.measure, cfg.cap)
        return _Forward(x, yb, keys, recon, l_recon, z_i, z_s, l_intra)

    def _local_root(self, fw: _Forward) -> Tensor:
        root = fw.l_recon
        if self.cfg.mu2 > 0:
            root = add(root, scale(fw.l_intra, self.cfg.mu2))
        return root

    def _aux(self, server: Server, fw: _Forward, barrier: tuple) -> np.ndarray:
        upload = LatentExchange("upload", "z_s", self.index, barrier, fw.z_s.data.copy(), fw.keys, self.label)
        reply, loss, correct = server.auxiliary(upload)
        if reply.payload.shape != upload.payload.shape:
            raise ValueError("gradient-return shape differs from upload")
        self.tally.aux.append(loss)
        self.tally.correct += correct
        self.tally.seen += len(upload.payload)
        return reply.payload

    def _finish(self, fw: _Forward, injections: dict[Tensor, np.ndarray], t: int) -> None:
        for term, value in (("l_recon", fw.l_recon.item()), ("l_intra", fw.l_intra.item())):
            _check_finite(value, t, self.index, term)
        self.tally.recon.append(fw.l_recon.item())
        self.tally.intra.append(fw.l_intra.item())
        params = self.model.all()
        zero_grad(params.values())
        backward(self._local_root(fw), injections)
        adam_step(params.values(), self.cfg.lr)

    def horizontal_step(self, server: Server, samples: Sequence[SliceSample], t: int, q: int, b: int) -> None:
        fw = self.forward(samples)
        g_s = self._aux(server, fw, ("H", t, q, b, self.index))
        self._finish(fw, {fw.z_s: g_s} if self.cfg.mu1 > 0 else {}, t)

    def epoch(self, server: Server, t: int, q: int) -> Iterator[LatentExchange]:
        """Run one local epoch; yields a z^I upload at every vertical barrier
        and expects the matching gradient-return (and loss) to be sent back."""
        hs = self.data.horizontal
        for b, idx in enumerate(horizontal_schedule(len(hs), self.cfg, t, q, self.index)):
            self.horizontal_step(server, [hs[i] for i in idx], t, q, b)
        vs = self.data.vertical
        for b, idx in enumerate(vertical_schedule(len(vs), self.cfg, t, q)):
            samples = [vs[i] for i in idx]
            keys = tuple((s.patient_id, s.slice_index) for s in samples)
            fw = self.forward(samples, keys)
            injections = {}
            if self.cfg.enable_cross:
                upload = LatentExchange("upload", "z_i", self.index, ("V", t, q, b), fw.z_i.data.copy(), tuple(idx.tolist()))
                reply, l_cross = yield upload
                if reply.payload.shape != upload.payload.shape:
                    raise ValueError("gradient-return shape differs from upload")
                _check_finite(l_cross, t, self.index, "l_cross")
                self.tally.cross.append(l_cross)
                if self.cfg.mu3 > 0:
                    injections[fw.z_i] = reply.payload
            g_s = self._aux(server, fw, ("V", t, q, b, self.index))
            if self.cfg.mu1 > 0:
                injections[fw.z_s] = g_s
            self._finish(fw, injections, t)


# ---------------------------------------------------------------------------
# round drivers


def _drive_sequential(server: Server, clients: Sequence[Client], t: int, q: int) -> None:
    gens = [c.epoch(server, t, q) for c in clients]
    pending = [next(g, None) for g in gens]
    while any(p is not None for p in pending):
        if any(p is None for p in pending):
            raise KeyOrderError("clients disagree on the number of vertical batches")
        server.messages["upload:z_i"] += len(pending)
        replies, losses = server.cross_gradients(pending)
        server.messages["return:z_i"] += len(replies)
        nxt = []
        for g, r, l in zip(gens, replies, losses):
            try:
                nxt.append(g.send((r, l)))
            except StopIteration:
                nxt.append(None)
        pending = nxt


def _drive_concurrent(server: Server, clients: Sequence[Client], t: int, q: int) -> None:
    errors: list[BaseException] = []

    def work(client: Client) -> None:
        try:
            gen = client.epoch(server, t, q)
            msg = next(gen, None)
            while msg is not None:
                reply = server.exchange(msg, len(clients), server.cfg.barrier_timeout)
                try:
                    msg = gen.send(reply)
                except StopIteration:
                    msg = None
        except BaseException as exc:  # surfaced in the driver thread
            errors.append(exc)
            server.abort()

    threads = [threading.Thread(target=work, args=(c,), name=f"client-{c.index}") for c in clients]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    server.reset_barriers()
    if errors:
        primary = next((e for e in errors if not isinstance(e, RoundAborted) or isinstance(e, BarrierTimeout)), errors[0])
        raise primary


def run_round(server: Server, clients: Sequence[Client], t: int) -> list[dict]:
    """Broadcast, Q local epochs per client, aggregate. Returns per-client log records.

    Any failure propagates before aggregation, leaving the global model untouched.
    """
    cfg = server.cfg
    server.round = t
    for c in clients:
        c.receive(server.global_params)
        c.tally = _Tally()
    server.messages["broadcast:model"] += len(clients)
    drive = _drive_concurrent if cfg.concurrent else _drive_sequential
    for q in range(cfg.local_epochs):
        drive(server, clients, t, q)
    server.aggregate([c.upload() for c in clients], [c.n_samples for c in clients])
    return [c.tally.summary(t, c.index) for c in clients]


# ---------------------------------------------------------------------------
# results, logs, checkpoints


@dataclass
class TrainingResult:
    """Trained state. ``models[k]`` is client k's evaluation model."""

    method: str
    config: FederationConfig
    models: list[dict[str, np.ndarray]]
    global_params: dict[str, np.ndarray] | None
    classifier: dict[str, np.ndarray]
    log: list[dict]
    messages: Counter
    history: list[dict[str, np.ndarray]] = field(default_factory=list)
    sample_counts: list[int] = field(default_factory=list)

    def model_params(self, k: int) -> ModelParams:
        vals = self.models[k]
        wrap = lambda prefix: {n: Parameter(v, n) for n, v in vals.items() if n.startswith(prefix + ".")}
        return ModelParams(wrap("E_I"), wrap("D"), wrap("E_S"))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, m in enumerate(self.models):
            out.update({f"client{k}/{n}": v for n, v in m.items()})
        if self.global_params is not None:
            out.update({f"global/{n}": v for n, v in self.global_params.items()})
        out.update({f"server/{n}": v for n, v in self.classifier.items()})
        return out

    def meta(self) -> dict:
        return {
            "method": self.method,
            "num_clients": len(self.models),
            "use_fusion": self.config.use_fusion if self.method.startswith("fedcrfd") else False,
            "config": self.config.to_dict(),
        }


def result_from_checkpoint(directory: str | os.PathLike) -> TrainingResult:
    tensors, meta = nn.load_checkpoint(directory)
    cfgd = dict(meta["config"])
    cfgd["arch"] = nn.arch_from_dict(cfgd["arch"])
    cfg = FederationConfig(**cfgd)
    models = [
        {n.split("/", 1)[1]: v for n, v in tensors.items() if n.startswith(f"client{k}/")}
        for k in range(meta["num_clients"])
    ]
    glob = {n.split("/", 1)[1]: v for n, v in tensors.items() if n.startswith("global/")} or None
    clf = {n.split("/", 1)[1]: v for n, v in tensors.items() if n.startswith("server/")}
    return TrainingResult(meta["method"], cfg, models, glob, clf, [], Counter())


class _Recorder:
    def __init__(self, out_dir: str | os.PathLike | None, cfg: FederationConfig):
        self.dir = Path(out_dir) if out_dir is not None else None
        self.cfg = cfg
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "log.jsonl").write_text("")

    def records(self, recs: list[dict]) -> None:
        if self.dir is None:
            return
        with open(self.dir / "log.jsonl", "a") as fh:
            for r in recs:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def checkpoint(self, t: int, result_fn: Callable[[], TrainingResult], final: bool = False) -> None:
        if self.dir is None:
            return
        if final or (self.cfg.checkpoint_every and t % self.cfg.checkpoint_every == 0):
            res = result_fn()
            name = "final" if final else f"round_{t:03d}"
            nn.save_checkpoint(self.dir / "checkpoints" / name, res.tensors(), res.meta())


# ---------------------------------------------------------------------------
# engines


def _data_for(partition: FederationPartition, cfg: FederationConfig) -> list[ClientData]:
    if partition.num_clients != cfg.num_clients:
        raise ValueError(f"config expects {cfg.num_clients} clients, partition has {partition.num_clients}")
    return partition.clients


def run_training(
    cfg: FederationConfig,
    partition: FederationPartition,
    out_dir: str | os.PathLike | None = None,
    keep_history: bool = False,
    method: str = "fedcrfd",
) -> TrainingResult:
    """Fed-CRFD over ``cfg.rounds`` communication rounds."""
    cfg.validate()
    datas = _data_for(partition, cfg)
    init = nn.init_model(cfg.arch, cfg.seed)
    num_classes = max(cfg.arch.num_modalities, max(d.modality for d in datas) + 1)
    server = Server(cfg, snapshot(init.aggregable()), num_classes)
    clients = [Client(d, nn.init_model(cfg.arch, cfg.seed), cfg) for d in datas]
    recorder = _Recorder(out_dir, cfg)
    log: list[dict] = []
    history = [dict(server.global_params)] if keep_history else []

    def result() -> TrainingResult:
        models = []
        for c in clients:
            m = dict(server.global_params)
            m.update(snapshot(c.model.specific_encoder))
            models.append(m)
        return TrainingResult(
            method, cfg, models, dict(server.global_params), snapshot(server.classifier),
            list(log), server.messages, history, [c.n_samples for c in clients],
        )

    for t in range(1, cfg.rounds + 1):
        recs = run_round(server, clients, t)
        log.extend(recs)
        recorder.records(recs)
        if keep_history:
            history.append(dict(server.global_params))
        recorder.checkpoint(t, result)
    out = result()
    recorder.checkpoint(cfg.rounds, lambda: out, final=True)
    return out


class _PlainLearner:
    """A plain single-encoder model trained on a list of (horizontal, vertical) sets."""

    def __init__(self, index: int, horizontal: list[SliceSample], vertical: list[SliceSample], cfg: FederationConfig):
        self.index = index
        self.horizontal = horizontal
        self.vertical = vertical
        self.cfg = cfg
        self.model = nn.init_model(cfg.arch, cfg.seed, specific_tag=None)
        self.tally = _Tally()

    @property
    def n_samples(self) -> int:
        return len(self.horizontal) + len(self.vertical)

    def step(self, samples: Sequence[SliceSample], t: int) -> None:
        xb, yb = stack_batch(samples)
        x = constant(xb)
        recon = nn.reconstruct(self.model, x, self.cfg.arch, use_fusion=False)
        loss = nn.recon_loss(recon, constant(yb))
        _check_finite(loss.item(), t, self.index, "l_recon")
        self.tally.recon.append(loss.item())
        params = self.model.all()
        zero_grad(params.values())
        backward(loss)
        adam_step(params.values(), self.cfg.lr)

    def epoch(self, t: int, q: int) -> None:
        hs, vs = self.horizontal, self.vertical
        for idx in horizontal_schedule(len(hs), self.cfg, t, q, self.index):
            self.step([hs[i] for i in idx], t)
        for idx in vertical_schedule(len(vs), self.cfg, t, q):
            self.step([vs[i] for i in idx], t)


BASELINES = ("solo", "centralized", "fedavg")


def run_baseline(
    kind: str,
    cfg: FederationConfig,
    partition: FederationPartition,
    out_dir: str | os.PathLike | None = None,
    keep_history: bool = False,
) -> TrainingResult:
    """Plain-model baselines sharing Fed-CRFD's batch schedule.

    ``solo`` trains one model per client with no communication,
    ``centralized`` pools every client's data into one model, ``fedavg``
    averages the plain models after each round.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}")
    cfg.validate()
    datas = _data_for(partition, cfg)
    if kind == "centralized":
        learners = [
            _PlainLearner(0, [s for d in datas for s in d.horizontal], [s for d in datas for s in d.vertical], cfg)
        ]
    else:
        learners = [_PlainLearner(d.index, d.horizontal, d.vertical, cfg) for d in datas]
    messages: Counter = Counter()
    global_params = snapshot(learners[0].model.aggregable()) if kind == "fedavg" else None
    recorder = _Recorder(out_dir, cfg)
    log: list[dict] = []
    history = []
    if keep_history:
        history.append(global_params if kind == "fedavg" else snapshot(learners[0].model.aggregable()))

    def result() -> TrainingResult:
        if kind == "centralized":
            models = [snapshot(learners[0].model.all()) for _ in datas]
        elif kind == "fedavg":
            models = [dict(global_params) for _ in datas]
        else:
            models = [snapshot(l.model.all()) for l in learners]
        return TrainingResult(kind, cfg, models, global_params, {}, list(log), messages, history, [l.n_samples for l in learners])

    for t in range(1, cfg.rounds + 1):
        for l in learners:
            if kind == "fedavg":
                l.model.load_aggregable(global_params)
                messages["broadcast:model"] += 1
            l.tally = _Tally()
            for q in range(cfg.local_epochs):
                l.epoch(t, q)
        if kind == "fedavg":
            messages["upload:model"] += len(learners)
            global_params = aggregate([snapshot(l.model.aggregable()) for l in learners], compute_weights([l.n_samples for l in learners]))
        recs = [l.tally.summary(t, l.index) for l in learners]
        log.extend(recs)
        recorder.records(recs)
        if keep_history:
            history.append(global_params if kind == "fedavg" else snapshot(learners[0].model.aggregable()))
        recorder.checkpoint(t, result)
    out = result()
    recorder.checkpoint(cfg.rounds, lambda: out, final=True)
    return out


METHODS = ("fedcrfd",) + BASELINES


def train(method: str, cfg: FederationConfig, partition: FederationPartition, out_dir=None, keep_history: bool = False) -> TrainingResult:
    if method == "fedcrfd":
        return run_training(cfg, partition, out_dir, keep_history)
    return run_baseline(method, cfg, partition, out_dir, keep_history)


def vertical_objective(
    model: ModelParams,
    classifier: dict[str, Parameter],
    x: np.ndarray,
    y: np.ndarray,
    label: int,
    other_latents: Sequence[np.ndarray],
    cfg: FederationConfig,
) -> Tensor:
    """The complete vertical-step loss as one graph, for checking the
    split client/server gradient path against a monolithic one."""
    arch = cfg.arch
    xt = constant(x)
    feat_i, skips, z_i = nn.encode_invariant(model, xt, arch)
    feat_s, z_s = nn.encode_specific(model, xt, arch)
    recon = nn.fuse_and_decode(model, feat_i, feat_s if cfg.use_fusion else None, skips, arch, cfg.use_fusion, residual=xt)
    n_classes = classifier[next(n for n in classifier if n.endswith("fc3.bias"))].shape[0]
    l_aux, _ = nn.aux_loss(classifier, z_s, nn.one_hot(label, n_classes, rows=len(x)))
    total = nn.recon_loss(recon, constant(y))
    total = add(total, scale(l_aux, cfg.mu1))
    total = add(total, scale(nn.intra_loss(z_i, z_s, cfg.measure, cfg.cap), cfg.mu2))
    total = add(total, scale(nn.cross_loss(z_i, [constant(o) for o in other_latents], cfg.measure), cfg.mu3))
    return total
