"""Pretraining, adapter fine-tuning runs, and the LoRA-vs-OLoRA comparison.

Convergence speed is scored as the eval loss at step ``T // 4``: for every
seed, OLoRA "wins" when its loss there is strictly below LoRA's. Both methods
of a seed see the same batch stream, dropout masks and hyperparameters; only
the adapter initialization differs.
"""

import hashlib
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .adapters import METHODS, AdapterConfig, AdaptedLinear, swap_adapter
from .data import CorpusConfig, StreamState, build_sources, conditional_entropy, eval_set, sample_batch
from .errors import ConfigError, DivergenceError, FormatError, RunError, ShapeError
from .model import DENSE_LAYERS, TinyLM, attach_adapters, trainable_count
from .optim import AdamW
from .persist import Checkpoint

CSV_COLUMNS = ("step", "split", "loss", "elapsed_ms", "method", "rank", "scale", "seed")
DROPOUT_STREAM = 101


@dataclass(frozen=True)
class TrainConfig:
    method: str = "olora"
    rank: int = 8
    alpha: float = 16.0
    scale: Optional[float] = None
    lr: float = 3e-4
    weight_decay: float = 0.1
    dropout: float = 0.05
    steps: int = 2000
    batch_size: int = 32
    eval_interval: int = 50
    eval_batches: int = 1
    seed: int = 0
    dropout_target: str = "update"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.eval_interval < 1 or (self.steps and self.steps % self.eval_interval):
            raise ConfigError(f"eval_interval {self.eval_interval} must divide steps {self.steps}")
        if self.batch_size < 1 or self.eval_batches < 1:
            raise ConfigError("batch_size and eval_batches must be positive")

    @property
    def s(self):
        return self.adapter_config().s

    def adapter_config(self):
        return AdapterConfig(rank=self.rank, alpha=self.alpha, scale=self.scale,
                             dropout=self.dropout, method=self.method, seed=self.seed,
                             dropout_target=self.dropout_target)

    def eval_steps(self):
        steps = set(range(0, self.steps + 1, self.eval_interval))
        steps.add(self.steps // 4)
        return sorted(steps)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    seed: int = 0


@dataclass
class MetricRecord:
    step: int
    split: str
    loss: float
    elapsed_ms: float


@dataclass
class RunMetrics:
    method: str
    rank: int
    scale: float
    seed: int
    spec_hash: str
    init_ms: float = 0.0
    batch_hash: str = ""
    records: list = field(default_factory=list)

    def add(self, step, split, loss, elapsed_ms):
        if not np.isfinite(loss):
            raise RunError(f"non-finite {split} loss at step {step}")
        self.records.append(MetricRecord(step, split, float(loss), float(elapsed_ms)))

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def eval_at(self, step):
        for r in self.records:
            if r.split == "eval" and r.step == step:
                return r.loss
        raise KeyError(f"no eval record at step {step}")

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for r in self.records:
            buf.write(f"{r.step},{r.split},{r.loss:.9g},{r.elapsed_ms:.9g},"
                      f"{self.method},{self.rank},{self.scale:.9g},{self.seed}\n")
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="\n", encoding="utf-8") as f:
            f.write(self.to_csv())


@dataclass
class PretrainResult:
    model: TinyLM
    initial_eval: float
    final_eval: float
    entropy: float

    @property
    def checkpoint(self):
        return base_checkpoint(self.model)


@dataclass
class AdaptResult:
    model: TinyLM
    metrics: RunMetrics
    base_eval: float

    @property
    def checkpoint(self):
        return adapter_checkpoint(self.model, self.metrics.seed)


def base_checkpoint(model):
    return Checkpoint("base", dict(model.base_weights()))


def adapter_checkpoint(model, seed):
    records = {}
    method = scale = rank = None
    for name in DENSE_LAYERS:
        layer = model.layers[name]
        if not isinstance(layer, AdaptedLinear):
            raise ConfigError(f"{name} carries no adapter")
        records[f"{name}.A"] = layer.a.value
        records[f"{name}.B"] = layer.b.value
        method, scale, rank = layer.method, layer.scale, layer.rank
    return Checkpoint("adapter", records,
                      {"method": method, "rank": rank, "scale": scale, "seed": int(seed)})


def model_from_checkpoint(ckpt, nonlinearity="gelu", context=8):
    if ckpt.role != "base":
        raise FormatError(f"expected a base checkpoint, got role {ckpt.role!r}")
    return TinyLM.from_weights(ckpt.records, nonlinearity=nonlinearity, context=context)


def load_adapter(base, ckpt, dropout=0.0):
    """Re-create the adapted model: re-run the (deterministic) init, then swap in the factors."""
    if ckpt.role != "adapter" or ckpt.config is None:
        raise FormatError("expected an adapter checkpoint with a config echo")
    cfg = ckpt.config
    acfg = AdapterConfig(rank=cfg["rank"], scale=cfg["scale"], dropout=dropout,
                         method=cfg["method"], seed=cfg["seed"])
    model, _ = attach_adapters(base, acfg)
    for name in DENSE_LAYERS:
        try:
            a = ckpt.records[f"{name}.A"]
            b = ckpt.records[f"{name}.B"]
        except KeyError as exc:
            raise FormatError(f"adapter checkpoint lacks {exc}") from None
        layer = model.layers[name]
        if a.shape != layer.a.shape or b.shape != layer.b.shape:
            raise ShapeError(f"{name}: adapter factors {b.shape} x {a.shape} do not fit "
                             f"base layer {layer.shape}")
        model.layers[name] = swap_adapter(layer, b, a)
    return model


def evaluate(model, tokens, n_batches=1):
    chunks = np.array_split(tokens, n_batches)
    return float(np.mean([model.eval_loss(c) for c in chunks]))


def _train_step(model, opt, tokens, rng):
    opt.zero_grad()
    tape, loss = model.loss(tokens, train_mode=True, rng=rng)
    tape.backward(loss)
    opt.step()
    return float(loss.value)


def pretrain(spec, corpus, steps=None, seed=None, config=None):
    """Full-parameter training of a fresh model on the unshifted source."""
    cfg = config or PretrainConfig()
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    source, _ = build_sources(spec.vocab, corpus)
    held_out = eval_set(source, corpus, spec.context)
    model = TinyLM.init(spec, cfg.seed)
    opt = AdamW(model.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(DROPOUT_STREAM,)))
    initial = evaluate(model, held_out)
    state = StreamState(cfg.seed + 1_000_003)
    for step in range(1, cfg.steps + 1):
        tokens = sample_batch(source, cfg.batch_size, spec.context, state)
        state = state.advance()
        try:
            _train_step(model, opt, tokens, rng)
        except DivergenceError as exc:
            raise RunError(f"pretraining diverged at step {step}: {exc}", step - 1) from exc
    final = evaluate(model, held_out)
    return PretrainResult(model, initial, final, conditional_entropy(source, spec.context))


def adapt(base, cfg, corpus):
    """Fine-tune adapters on the shifted source, logging train and eval loss."""
    _, shifted = build_sources(base.spec.vocab, corpus)
    held_out = eval_set(shifted, corpus, base.spec.context)
    base_eval = evaluate(base, held_out, cfg.eval_batches)

    t0 = time.perf_counter()
    model, registry = attach_adapters(base, cfg.adapter_config())
    init_ms = (time.perf_counter() - t0) * 1e3
    opt = AdamW(registry, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if opt.registered_count != trainable_count(registry):
        raise RunError("optimizer registry does not match the adapter registry")

    metrics = RunMetrics(cfg.method, cfg.rank, cfg.s, cfg.seed, base.spec.digest(), init_ms)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(DROPOUT_STREAM,)))
    digest = hashlib.sha256()
    eval_steps = set(cfg.eval_steps())
    state = StreamState(cfg.seed)
    start = time.perf_counter()
    metrics.add(0, "eval", evaluate(model, held_out, cfg.eval_batches), 0.0)
    for step in range(1, cfg.steps + 1):
        tokens = sample_batch(shifted, cfg.batch_size, base.spec.context, state)
        state = state.advance()
        digest.update(tokens.tobytes())
        try:
            loss = _train_step(model, opt, tokens, rng)
        except DivergenceError as exc:
            raise RunError(f"{cfg.method} seed {cfg.seed} diverged at step {step}: {exc}",
                           step - 1) from exc
        metrics.add(step, "train", loss, (time.perf_counter() - start) * 1e3)
        if step in eval_steps:
            ev = evaluate(model, held_out, cfg.eval_batches)
            if not np.isfinite(ev):
                raise RunError(f"non-finite eval loss at step {step}", step - 1)
            metrics.add(step, "eval", ev, (time.perf_counter() - start) * 1e3)
    metrics.batch_hash = digest.hexdigest()
    return AdaptResult(model, metrics, base_eval)


def _run_cell(args):
    base, cfg, corpus = args
    try:
        return adapt(base, cfg, corpus).metrics, None
    except RunError as exc:
        return None, str(exc)


def compare(base, corpus, cfg, seeds, methods=METHODS, jobs=1):
    """Run every (method, seed) cell and summarize convergence at ``T // 4``.

    Returns ``(summary, runs)``; ``runs`` maps ``(method, seed)`` to
    :class:`RunMetrics` (None for failed cells). The summary holds no timing
    data, so identical inputs give an identical summary.
    """
    seeds = list(seeds)
    methods = sorted(set(methods))
    if len(seeds) < 3:
        raise ConfigError(f"compare needs at least 3 seeds, got {len(seeds)}")
    if any(m not in METHODS for m in methods):
        raise ConfigError(f"unknown method in {methods}")
    cells = [(m, s) for s in seeds for m in methods]
    work = [(base, replace(cfg, method=m, seed=s), corpus) for m, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]
    runs = {cell: res[0] for cell, res in zip(cells, results)}
    failed = [{"method": m, "seed": s, "error": res[1]}
              for (m, s), res in zip(cells, results) if res[0] is None]
    return summarize(runs, cfg, seeds, methods, failed), runs


def summarize(runs, cfg, seeds, methods, failed=()):
    checkpoint = cfg.steps // 4
    trajectories = {}
    at_checkpoint = {}
    for m in methods:
        ok = [runs[(m, s)] for s in seeds if runs.get((m, s)) is not None]
        at_checkpoint[m] = {str(s): runs[(m, s)].eval_at(checkpoint)
                            for s in seeds if runs.get((m, s)) is not None}
        if ok:
            steps = [r.step for r in ok[0].split("eval")]
            trajectories[m] = [[st, float(np.mean([r.eval_at(st) for r in ok]))] for st in steps]
        else:
            trajectories[m] = []
    wins = None
    fair = True
    if "lora" in methods and "olora" in methods:
        wins = 0
        for s in seeds:
            lo, ol = runs.get(("lora", s)), runs.get(("olora", s))
            if lo is None or ol is None:
                continue
            fair &= lo.batch_hash == ol.batch_hash
            if ol.eval_at(checkpoint) < lo.eval_at(checkpoint):
                wins += 1
    return {
        "methods": list(methods),
        "seeds": list(seeds),
        "steps": cfg.steps,
        "checkpoint_step": checkpoint,
        "config": {k: v for k, v in asdict(cfg).items() if k not in ("method", "seed")},
        "mean_trajectory": trajectories,
        "checkpoint_loss": at_checkpoint,
        "mean_checkpoint_loss": {m: (float(np.mean(list(v.values()))) if v else None)
                                 for m, v in at_checkpoint.items()},
        "win_count": wins,
        "shared_batches": fair,
        "failed": list(failed),
    }


def qr_overhead_report(spec, cfg, seed=0, probe_steps=20, corpus=None):
    """Wall time of OLoRA init over all layers against the mean training step.

    ``ratio = init_ms / (T * per_step_ms)``; init is the median of five
    repetitions and the per-step time a mean over ``probe_steps`` real steps.
    """
    if cfg.steps < 100:
        raise ConfigError("qr_overhead_report needs T >= 100")
    corpus = corpus or CorpusConfig()
    base = TinyLM.init(spec, seed)
    acfg = replace(cfg, method="olora").adapter_config()
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        model, registry = attach_adapters(base, acfg)
        times.append((time.perf_counter() - t0) * 1e3)
    init_ms = float(np.median(times))
    _, shifted = build_sources(spec.vocab, corpus)
    opt = AdamW(registry, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    state = StreamState(seed)
    batches = []
    for _ in range(probe_steps):
        batches.append(sample_batch(shifted, cfg.batch_size, spec.context, state))
        state = state.advance()
    t0 = time.perf_counter()
    for tokens in batches:
        _train_step(model, opt, tokens, rng)
    per_step_ms = (time.perf_counter() - t0) * 1e3 / probe_steps
    return {"init_ms": init_ms, "per_step_ms": per_step_ms, "steps": cfg.steps,
            "ratio": init_ms / (cfg.steps * per_step_ms)}


def gradcheck_model(spec, cfg, batch_size=4, seed=0):
    """64-bit adapted model with every factor nudged off its init, plus a batch.

    The nudge makes LoRA's zero ``B`` nonzero so all backward paths carry signal.
    """
    spec64 = replace(spec, precision=64)
    base = TinyLM.init(spec64, seed)
    model, registry = attach_adapters(base, cfg.adapter_config())
    rng = np.random.default_rng(seed)
    for p in registry:
        p.value = p.value + 0.05 * rng.standard_normal(p.value.shape)
    source, _ = build_sources(spec.vocab, CorpusConfig())
    tokens = sample_batch(source, batch_size, spec.context, StreamState(seed))
    return model, tokens
