"""End-to-end experiment pipelines: attack training, defense runs, metrics, sweeps.

A run is driven entirely by an ExperimentConfig (flat sections, file
round-trippable); every random choice flows from the single data seed
through named child streams, so a config determines checkpoints and CSV
outputs byte-for-byte.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    PoisonPlan,
    TriggerSpec,
    gen_synth,
    load_cifar_bin,
    load_idx,
    make_poison_testset,
    poison_dataset,
    split_validation,
)
from .model import (
    Network,
    init_network,
    predict,
    reference_cnn,
    reference_mlp,
    save_checkpoint,
)
from .numerics import RngState
from .optim import LrSchedule, first_order_step, make_optimizer
from .purification import PurifyConfig, TraceRow, finetune_baseline, purify, write_trace_csv
from . import hessian


class TrainingError(RuntimeError):
    """Training diverged; carries the epoch index."""

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class EvaluationError(ValueError):
    """Metrics were requested over an empty evaluation set."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    kind: str = "synth"          # synth | idx | cifar
    seed: int = 1234
    classes: int = 10
    per_class: int = 700         # training-pool samples per class
    test_per_class: int = 100
    channels: int = 1
    height: int = 16
    width: int = 16
    noise: float = 0.1
    distractor_prob: float = 0.0
    distractor_size: int = 4
    distractor_saturated: float = 0.05
    train_images: str = ""       # idx/cifar sources, when kind != synth
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ArchConfig:
    kind: str = "cnn"            # cnn | mlp
    hidden1: int = 32
    hidden2: int = 32
    conv1: int = 8
    conv2: int = 16


@dataclass
class AttackConfig:
    enabled: bool = True
    trigger: str = "patch"       # patch | blend | sig
    poison_rate: float = 0.10
    mapping: str = "one"
    target: int = 0
    shift: int = 1
    clean_label: bool = False
    patch_size: int = 3
    patch_intensity: float = 1.0
    blend_alpha: float = 0.2
    blend_seed: int = 7
    sig_amplitude: float = 0.08
    sig_frequency: float = 6.0

    def trigger_spec(self) -> TriggerSpec:
        if self.trigger == "patch":
            return TriggerSpec("patch", size=self.patch_size,
                               intensity=self.patch_intensity)
        if self.trigger == "blend":
            return TriggerSpec("blend", alpha=self.blend_alpha,
                               pattern_seed=self.blend_seed)
        if self.trigger == "sig":
            return TriggerSpec("sig", amplitude=self.sig_amplitude,
                               frequency=self.sig_frequency)
        raise ValueError(f"unknown trigger {self.trigger!r}")

    def poison_plan(self) -> PoisonPlan:
        return PoisonPlan(self.trigger_spec(), self.poison_rate, self.mapping,
                          self.target, self.shift, self.clean_label)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_factor: float = 1.0
    lr_interval: int = 40
    val_fraction: float = 0.01

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_factor, self.lr_interval)


@dataclass
class DefenseConfig:
    method: str = "ngf"          # ngf | sgd | adagrad | rmsprop | adam | sam | none
    scope: str = "head"          # head | full
    epochs: int = 100
    lr: float = 0.01
    lr_factor: float = 0.1
    lr_interval: int = 40
    eta: float = 0.1
    damping: float = 1e-3        # < 0 selects the per-step scale-invariant default
    sam_rho: float = 0.05

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_factor, self.lr_interval)


@dataclass
class SmoothnessConfig:
    max_iters: int = 100
    tol: float = 1e-3
    trace_probes: int = 100
    slq_steps: int = 20
    slq_probes: int = 4
    bins: int = 40
    data_cap: int = 2048
    seed: int = 777


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    smoothness: SmoothnessConfig = field(default_factory=SmoothnessConfig)
    outdir: str = "runs/out"

    _SECTIONS = ("data", "arch", "attack", "train", "defense", "smoothness")

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for section in self._SECTIONS:
            obj = getattr(self, section)
            parser[section] = {
                f.name: repr(getattr(obj, f.name)) if isinstance(getattr(obj, f.name), float)
                else str(getattr(obj, f.name))
                for f in dataclasses.fields(obj)
            }
        parser["run"] = {"outdir": self.outdir}
        out = []
        for section in parser.sections():
            out.append(f"[{section}]")
            for key, val in parser[section].items():
                out.append(f"{key} = {val}")
            out.append("")
        return "\n".join(out)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        config = cls()
        for section in cls._SECTIONS:
            if not parser.has_section(section):
                continue
            obj = getattr(config, section)
            for f in dataclasses.fields(obj):
                if parser.has_option(section, f.name):
                    setattr(obj, f.name, _parse_value(f.type, parser.get(section, f.name)))
        if parser.has_option("run", "outdir"):
            config.outdir = parser.get("run", "outdir")
        return config

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def apply_override(self, dotted_key: str, value: str) -> None:
        """Set one ``section.key`` from its string form (CLI override hook)."""
        section, _, key = dotted_key.partition(".")
        if section == "run" and key == "outdir":
            self.outdir = value
            return
        if section not in self._SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        for f in dataclasses.fields(obj):
            if f.name == key:
                setattr(obj, key, _parse_value(f.type, value))
                return
        raise KeyError(f"unknown config key {dotted_key!r}")


def _parse_value(type_name, raw: str):
    raw = raw.strip()
    name = type_name if isinstance(type_name, str) else type_name.__name__
    if name == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if name == "int":
        return int(raw)
    if name == "float":
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    acc: float
    asr: float
    n_clean: int
    n_poison: int
    model_digest: str
    timestamp: str = field(default="", compare=False)


def model_digest(net: Network) -> str:
    h = hashlib.sha256()
    h.update(repr([s.describe() for s in net.layers]).encode())
    h.update(net.params.tobytes())
    return h.hexdigest()


def evaluate(net: Network, clean_test: Dataset, poison_test: Dataset,
             target: int) -> MetricsRecord:
    """ACC over the clean test set; ASR = fraction of triggered samples
    classified as the attack target."""
    if clean_test.n == 0 or poison_test.n == 0:
        raise EvaluationError("evaluation sets must be nonempty")
    acc = float(np.mean(predict(net, clean_test.images) == clean_test.labels))
    asr = float(np.mean(predict(net, poison_test.images) == target))
    return MetricsRecord(acc=acc, asr=asr, n_clean=clean_test.n, n_poison=poison_test.n,
                         model_digest=model_digest(net),
                         timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"))


def write_metrics_csv(records: dict[str, MetricsRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "acc", "asr", "n_clean", "n_poison", "model_digest"])
        for stage, r in records.items():
            writer.writerow([stage, f"{r.acc:.6f}", f"{r.asr:.6f}",
                             r.n_clean, r.n_poison, r.model_digest])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class DataBundle:
    train_set: Dataset       # what the model actually trains on (possibly poisoned)
    clean_train: Dataset     # same pool, pre-poisoning (smoothness probes use this)
    val: Dataset             # clean, held out before any poisoning
    clean_test: Dataset
    poison_test: Dataset


def build_architecture(config: ExperimentConfig) -> list:
    if config.arch.kind == "cnn":
        return reference_cnn(config.data.classes, (config.arch.conv1, config.arch.conv2))
    if config.arch.kind == "mlp":
        return reference_mlp(config.data.classes, (config.arch.hidden1, config.arch.hidden2))
    raise ValueError(f"unknown architecture {config.arch.kind!r}")


def network_input_shape(config: ExperimentConfig):
    dims = (config.data.channels, config.data.height, config.data.width)
    if config.arch.kind == "mlp":
        return int(np.prod(dims))
    return dims


def load_source_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = config.data
    root = RngState(d.seed)
    if d.kind == "synth":
        dims = (d.channels, d.height, d.width)
        kwargs = dict(dims=dims, noise=d.noise, distractor_prob=d.distractor_prob,
                      distractor_size=d.distractor_size,
                      distractor_saturated=d.distractor_saturated)
        train = gen_synth(root.derive("train"), d.classes, d.per_class, **kwargs)
        test = gen_synth(root.derive("test"), d.classes, d.test_per_class, **kwargs)
        return train, test
    if d.kind == "idx":
        train = load_idx(d.train_images, d.train_labels, d.classes)
        test = load_idx(d.test_images, d.test_labels, d.classes)
        return train, test
    if d.kind == "cifar":
        train = load_cifar_bin(d.train_images.split(","), d.classes)
        test = load_cifar_bin(d.test_images.split(","), d.classes)
        return train, test
    raise ValueError(f"unknown data kind {d.kind!r}")


def prepare_data(config: ExperimentConfig) -> DataBundle:
    root = RngState(config.data.seed)
    train_pool, test_set = load_source_datasets(config)
    val, rest = split_validation(train_pool, config.train.val_fraction,
                                 root.derive("val-split"))
    plan = config.attack.poison_plan()
    if config.attack.enabled and config.attack.poison_rate > 0:
        train_set = poison_dataset(rest, plan, root.derive("poison"))
    else:
        train_set = rest
    poison_test = make_poison_testset(test_set, plan.trigger, config.attack.target)
    return DataBundle(train_set=train_set, clean_train=rest, val=val,
                      clean_test=test_set, poison_test=poison_test)


def train_classifier(net: Network, train_set: Dataset, epochs: int, batch_size: int,
                     schedule: LrSchedule, momentum: float, rng: RngState) -> Network:
    """Minibatch SGD, reshuffled each epoch from a per-epoch child stream."""
    state = make_optimizer("sgd", lr=schedule.initial, momentum=momentum)
    epoch_streams = rng.split(max(epochs, 1))
    for epoch in range(epochs):
        state.lr = schedule.lr(epoch)
        order = epoch_streams[epoch].generator().permutation(train_set.n)
        for start in range(0, train_set.n, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = loss_and_grad_full(net, train_set, idx)
            if not np.isfinite(loss):
                raise TrainingError(epoch, f"loss diverged to {loss}")
            net.params[:] = first_order_step(state, net.params, grad)
    return net


def loss_and_grad_full(net: Network, dataset: Dataset, idx) -> tuple[float, np.ndarray]:
    from .model import loss_and_grad

    return loss_and_grad(net, dataset.images[idx], dataset.labels[idx], scope="full")


@dataclass
class TrainResult:
    net: Network
    metrics: MetricsRecord
    bundle: DataBundle


def train_backdoor(config: ExperimentConfig) -> TrainResult:
    """Train on the (possibly poisoned) set and report initial ASR/ACC."""
    bundle = prepare_data(config)
    root = RngState(config.data.seed)
    net = init_network(build_architecture(config), network_input_shape(config),
                       config.data.classes, root.derive("init"))
    train_classifier(net, bundle.train_set, config.train.epochs,
                     config.train.batch_size, config.train.schedule(),
                     config.train.momentum, root.derive("epochs"))
    metrics = evaluate(net, bundle.clean_test, bundle.poison_test, config.attack.target)
    return TrainResult(net=net, metrics=metrics, bundle=bundle)


# ---------------------------------------------------------------------------
# defenses
# ---------------------------------------------------------------------------

@dataclass
class DefenseResult:
    net: Network
    before: MetricsRecord
    after: MetricsRecord
    trace: list[TraceRow]
    runtime_seconds: float


def run_defense(config: ExperimentConfig, net: Network, bundle: DataBundle) -> DefenseResult:
    """Apply the configured defense to a trained network."""
    d = config.defense
    before = evaluate(net, bundle.clean_test, bundle.poison_test, config.attack.target)
    start = time.perf_counter()
    if d.method == "none":
        purified, trace = net.copy(), []
    elif d.method == "ngf":
        damping = None if d.damping < 0 else d.damping
        purify_config = PurifyConfig(eta=d.eta, schedule=d.schedule(),
                                     epochs=d.epochs, damping=damping)
        purified, trace = purify(net, bundle.val, purify_config)
    else:
        scope = "head_only" if d.scope == "head" else "full"
        kwargs = {"rho": d.sam_rho} if d.method == "sam" else {}
        purified, trace = finetune_baseline(net, bundle.val, d.method, scope,
                                            d.epochs, d.schedule(), **kwargs)
    runtime = time.perf_counter() - start
    after = evaluate(purified, bundle.clean_test, bundle.poison_test, config.attack.target)
    return DefenseResult(net=purified, before=before, after=after,
                         trace=trace, runtime_seconds=runtime)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, config: ExperimentConfig, artifacts: dict[str, str],
                   metrics: dict[str, MetricsRecord], runtime_seconds: float) -> None:
    """Plain-text run manifest: config snapshot, artifact digests, metrics."""
    lines = ["# run manifest", ""]
    lines.append("[artifacts]")
    for name, p in sorted(artifacts.items()):
        if not Path(p).exists():
            raise FileNotFoundError(f"manifest references missing artifact {p}")
        lines.append(f"{name} = {Path(p).name} sha256:{file_digest(p)}")
    lines.append("")
    lines.append("[metrics]")
    for stage, r in metrics.items():
        lines.append(f"{stage} = acc:{r.acc:.6f} asr:{r.asr:.6f} "
                     f"n_clean:{r.n_clean} n_poison:{r.n_poison} digest:{r.model_digest[:16]}")
    lines.append("")
    lines.append(f"[runtime]\nseconds = {runtime_seconds:.3f}")
    lines.append("")
    lines.append("[config]")
    lines.extend(config.to_text().split("\n"))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

@dataclass
class SuiteCell:
    name: str
    overrides: dict[str, str]
    # threshold checks evaluated by `suite --check`; each is (metric, op, bound)
    checks: list[tuple[str, str, float]] = field(default_factory=list)


def default_suite_cells(include_checks: bool = True) -> list[SuiteCell]:
    """The paper-mirroring sweep at desk scale: attack cells, equal-budget
    head baselines, the regularizer ablation, and high poison rates."""

    def checks(*items):
        return list(items) if include_checks else []

    cells = [
        SuiteCell("badnets_ngf", {"attack.trigger": "patch", "defense.method": "ngf"},
                  checks(("asr_after", "<=", 0.10), ("acc_drop", "<=", 0.05))),
        SuiteCell("badnets_sgd_head", {"attack.trigger": "patch", "defense.method": "sgd"},
                  checks(("asr_after", ">=", 0.50))),
        SuiteCell("badnets_ngf_noreg", {"attack.trigger": "patch", "defense.method": "ngf",
                                        "defense.eta": "0.0"},
                  checks(("asr_after", "<=", 0.10))),
        SuiteCell("blend_ngf", {"attack.trigger": "blend", "defense.method": "ngf"},
                  checks(("asr_after", "<=", 0.10), ("acc_drop", "<=", 0.05))),
        SuiteCell("sig_ngf", {"attack.trigger": "sig", "defense.method": "ngf"},
                  checks(("asr_after", "<=", 0.10), ("acc_drop", "<=", 0.05))),
    ]
    for rate in (0.25, 0.35, 0.50):
        cells.append(SuiteCell(
            f"badnets_rate{int(rate * 100)}_ngf",
            {"attack.poison_rate": repr(rate), "defense.method": "ngf"},
            checks(("asr_after", "<=", 0.10)),
        ))
    # validation-size sensitivity sweep (no thresholds; reported only)
    for fraction in (0.01, 0.02, 0.04, 0.07):
        cells.append(SuiteCell(
            f"badnets_val{int(fraction * 1000):03d}_ngf",
            {"train.val_fraction": repr(fraction), "defense.method": "ngf"},
        ))
    return cells


@dataclass
class CellResult:
    name: str
    ok: bool
    error: str
    asr_before: float
    acc_before: float
    asr_after: float
    acc_after: float
    runtime_seconds: float
    checks_passed: bool


def run_suite(base_config: ExperimentConfig, cells: list[SuiteCell], outdir,
              check: bool = False) -> list[CellResult]:
    """Run every cell, emit per-cell artifacts and an aggregate CSV.

    A failing cell is recorded and skipped. When ``check`` is set, each
    cell's threshold checks are evaluated and reported.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    results: list[CellResult] = []
    shared: dict[str, TrainResult] = {}

    for cell in cells:
        config = ExperimentConfig.from_text(base_config.to_text())
        for key, val in cell.overrides.items():
            config.apply_override(key, val)
        config.outdir = str(outdir / cell.name)
        cell_dir = Path(config.outdir)
        cell_dir.mkdir(parents=True, exist_ok=True)
        try:
            start = time.perf_counter()
            # cells differing only in defense reuse one trained attack model
            train_key = repr((config.data, config.arch, config.attack, config.train))
            if train_key not in shared:
                shared[train_key] = train_backdoor(config)
            trained = shared[train_key]
            defense = run_defense(config, trained.net, trained.bundle)
            runtime = time.perf_counter() - start

            ckpt = cell_dir / "purified.ckpt"
            save_checkpoint(defense.net, ckpt)
            write_trace_csv(defense.trace, cell_dir / "trace.csv")
            write_metrics_csv({"before": defense.before, "after": defense.after},
                              cell_dir / "metrics.csv")
            config.save(cell_dir / "config.ini")
            write_manifest(cell_dir / "manifest.txt", config,
                           {"checkpoint": ckpt, "trace": cell_dir / "trace.csv",
                            "metrics": cell_dir / "metrics.csv"},
                           {"before": defense.before, "after": defense.after}, runtime)

            passed = True
            if check:
                values = {
                    "asr_before": defense.before.asr,
                    "acc_before": defense.before.acc,
                    "asr_after": defense.after.asr,
                    "acc_after": defense.after.acc,
                    "acc_drop": defense.before.acc - defense.after.acc,
                }
                for metric, op, bound in cell.checks:
                    v = values[metric]
                    ok = v <= bound if op == "<=" else v >= bound
                    if not ok:
                        passed = False
            results.append(CellResult(cell.name, True, "",
                                      defense.before.asr, defense.before.acc,
                                      defense.after.asr, defense.after.acc,
                                      runtime, passed))
        except Exception as exc:  # record and continue with remaining cells
            results.append(CellResult(cell.name, False, f"{type(exc).__name__}: {exc}",
                                      float("nan"), float("nan"), float("nan"),
                                      float("nan"), 0.0, False))

    write_suite_csv(results, outdir / "suite.csv")
    return results


def write_suite_csv(results: list[CellResult], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "ok", "error", "asr_before", "acc_before",
                         "asr_after", "acc_after", "runtime_seconds", "checks_passed"])
        for r in results:
            writer.writerow([
                r.name, int(r.ok), r.error,
                f"{r.asr_before:.6f}", f"{r.acc_before:.6f}",
                f"{r.asr_after:.6f}", f"{r.acc_after:.6f}",
                f"{r.runtime_seconds:.3f}", int(r.checks_passed),
            ])


def aggregate_reports(outdir, path) -> int:
    """Collect every per-cell metrics.csv under ``outdir`` into one CSV."""
    outdir = Path(outdir)
    rows = []
    for metrics_path in sorted(outdir.glob("**/metrics.csv")):
        cell = metrics_path.parent.name
        with open(metrics_path, newline="") as f:
            for record in csv.DictReader(f):
                rows.append({"cell": cell, **record})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "stage", "acc", "asr", "n_clean", "n_poison", "model_digest"])
        for r in rows:
            writer.writerow([r["cell"], r["stage"], r["acc"], r["asr"],
                             r["n_clean"], r["n_poison"], r["model_digest"]])
    return len(rows)


def smoothness_for_model(config: ExperimentConfig, net: Network,
                         bundle: DataBundle) -> hessian.SmoothnessReport:
    s = config.smoothness
    return hessian.smoothness_report(
        net, bundle.clean_train, RngState(s.seed), max_iters=s.max_iters, tol=s.tol,
        trace_probes=s.trace_probes, slq_steps=s.slq_steps, slq_probes=s.slq_probes,
        bins=s.bins, data_cap=s.data_cap)
