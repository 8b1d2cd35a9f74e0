"""Experiment orchestration: declarative configs, seeded pipelines, CSV/JSON
artifacts with a digest manifest.

Config files are flat ``key = value`` text with dotted section names and
``#`` comments.  A master seed fans out to per-stage child seeds by hashing
the stage name with the master, so adding a stage never perturbs earlier
stages' randomness.  Reruns with identical config and seed produce
byte-identical numeric artifacts.

Usage: ``advscale <kind> --config <path> [--seed N] [--out DIR]``.
Exit codes: 0 success, 1 config validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, attacks, data as data_mod, logit_stats, nn, response

KINDS = (
    "train",
    "attack-curve",
    "fit",
    "epsilon-hat",
    "delta-dist",
    "oracle",
    "transfer",
    "entropy-compare",
    "shuffled-labels",
)

DATA_DIR_ENV = "ADVSCALE_DATA_DIR"


class ConfigError(ValueError):
    pass


def derive_seed(master: int, label: str) -> int:
    """Stable child seed from the master seed and a stage label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


class Config:
    """Typed access to the flat key/value map; tracks consumed keys so
    unknown (misspelled) keys can be rejected per experiment kind."""

    def __init__(self, pairs: dict):
        self.pairs = dict(pairs)
        self._consumed = set()

    def _fetch(self, key, default, required):
        if key in self.pairs:
            self._consumed.add(key)
            return self.pairs[key]
        if required:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def get(self, key, default=None, required=False) -> str:
        return self._fetch(key, default, required)

    def get_int(self, key, default=None, required=False) -> int:
        raw = self._fetch(key, None, required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}") from None

    def get_float(self, key, default=None, required=False) -> float:
        raw = self._fetch(key, None, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}") from None

    def get_bool(self, key, default=False) -> bool:
        raw = self._fetch(key, None, False)
        if raw is None:
            return default
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")

    def reject_unknown(self):
        unknown = set(self.pairs) - self._consumed
        if unknown:
            raise ConfigError(
                "unknown config keys: " + ", ".join(sorted(unknown))
            )

    def canonical_text(self) -> str:
        return "".join(f"{k} = {self.pairs[k]}\n" for k in sorted(self.pairs))

    def to_json(self) -> dict:
        return dict(sorted(self.pairs.items()))


def parse_eps_grid(spec: str) -> np.ndarray:
    """'log:LO:HI:N' for a log-spaced grid, or a comma list of values."""
    spec = spec.strip()
    if spec.startswith("log:"):
        try:
            _, lo, hi, n = spec.split(":")
            return attacks.default_eps_grid(float(lo), float(hi), int(n))
        except ValueError:
            raise ConfigError(f"bad eps grid {spec!r}; want log:LO:HI:N") from None
    try:
        return np.array([float(tok) for tok in spec.split(",") if tok.strip()])
    except ValueError:
        raise ConfigError(f"bad eps grid {spec!r}") from None


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------

def _resolve_path(raw: str) -> Path:
    p = Path(raw)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and base:
        candidate = Path(base) / p
        if candidate.exists():
            return candidate
    return p


def _load_datasets(cfg: Config, master: int, need_test: bool):
    source = cfg.get("data.source", required=True)
    n_classes = cfg.get_int("data.classes", 10)
    if source == "idx":
        train = data_mod.load_idx(
            _resolve_path(cfg.get("data.train_images", required=True)),
            _resolve_path(cfg.get("data.train_labels", required=True)),
            n_classes=n_classes,
            split="train",
        )
        test = None
        test_images = cfg.get("data.test_images", required=need_test)
        if test_images is not None:
            test = data_mod.load_idx(
                _resolve_path(test_images),
                _resolve_path(cfg.get("data.test_labels", required=True)),
                n_classes=n_classes,
                split="test",
            )
    elif source == "synth":
        base = data_mod.SynthConfig(
            n_classes=n_classes,
            dims=cfg.get_int("data.dims", required=True),
            per_class=cfg.get_int("data.per_class", required=True),
            separation=cfg.get_float("data.separation", required=True),
            std=cfg.get_float("data.std", required=True),
            seed=derive_seed(master, "synth-train"),
        )
        train = data_mod.synth_blobs(base, split="train")
        test_per_class = cfg.get_int("data.test_per_class", base.per_class)
        test = data_mod.synth_blobs(
            replace(base, per_class=test_per_class, seed=derive_seed(master, "synth-test")),
            split="test",
        )
    else:
        raise ConfigError(f"data.source must be idx or synth, got {source!r}")
    limit = cfg.get_int("data.train_limit")
    if limit:
        train = train.subset(limit)
    limit = cfg.get_int("data.test_limit")
    if limit and test is not None:
        test = test.subset(limit)
    return train, test


def _train_config(cfg: Config, master: int, stage: str = "train") -> nn.TrainConfig:
    adv_mix = None
    fam = cfg.get("train.adv_mix_family")
    if fam:
        adv_mix = nn.AdvMix(
            spec=attacks.AttackSpec(
                family=fam,
                epsilon=cfg.get_float("train.adv_mix_epsilon", required=True),
            ),
            fraction=cfg.get_float("train.adv_mix_fraction", 0.5),
        )
    return nn.TrainConfig(
        lr=cfg.get_float("train.lr", required=True),
        epochs=cfg.get_int("train.epochs", required=True),
        batch_size=cfg.get_int("train.batch_size", 32),
        momentum=cfg.get_float("train.momentum", 0.0),
        seed=derive_seed(master, stage),
        adv_mix=adv_mix,
        dropout=cfg.get_float("train.dropout", 0.0),
        stop_at_train_acc=cfg.get_float("train.stop_at_train_acc"),
    )


def _build_and_train(cfg: Config, master: int, train_data,
                     entropy_lambda=None, stage: str = ""):
    arch = nn.parse_arch(
        cfg.get("arch", required=True), train_data.inputs.shape[1:]
    )
    net = nn.init_network(arch, derive_seed(master, f"init{stage}"))
    tc = _train_config(cfg, master, stage=f"train{stage}")
    lam = (
        entropy_lambda
        if entropy_lambda is not None
        else cfg.get_float("train.entropy_lambda", 0.0)
    )
    result = nn.train(net, train_data, tc, nn.LossSpec(lam))
    return result


def _attack_spec(cfg: Config, required_eps: bool = False) -> attacks.AttackSpec:
    return attacks.AttackSpec(
        family=cfg.get("attack.family", "fgsm_linf"),
        epsilon=cfg.get_float("attack.epsilon", 0.0, required=required_eps),
        pgd_steps=cfg.get_int("attack.pgd_steps", 20),
        pgd_step_size=cfg.get_float("attack.pgd_step_size"),
        pgd_random_start=cfg.get_bool("attack.pgd_random_start", False),
        clip_to_valid=cfg.get_bool("attack.clip", True),
    )


def _write_metrics_csv(path, history):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "train_accuracy"])
        for m in history:
            w.writerow([m.epoch, repr(m.mean_loss), repr(m.train_accuracy)])


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


class Workspace:
    """Output directory with a run lock and a digest manifest."""

    def __init__(self, out_dir: Path, kind: str, seed: int, config_sha: str):
        self.dir = Path(out_dir)
        self.kind = kind
        self.seed = seed
        self.config_sha = config_sha
        self.files = []
        self._lock = self.dir / ".lock"

    def __enter__(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory {self.dir} is locked by another run "
                f"(remove {self._lock} if stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def finish(self, status: str):
        digests = {}
        for name in self.files:
            p = self.dir / name
            if p.exists():
                digests[name] = hashlib.sha256(p.read_bytes()).hexdigest()
            else:
                status = "partial"
        manifest = {
            "kind": self.kind,
            "seed": self.seed,
            "config_sha256": self.config_sha,
            "version": __version__,
            "status": status,
            "files": digests,
        }
        _write_json(self.dir / "manifest.json", manifest)

    def __exit__(self, exc_type, exc, tb):
        try:
            self.finish("partial" if exc_type else "complete")
        finally:
            self._lock.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------------------
# Experiment kinds
# ---------------------------------------------------------------------------

def _kind_train(cfg, ws, master):
    train_data, test = _load_datasets(cfg, master, need_test=False)
    result = _build_and_train(cfg, master, train_data)
    _write_metrics_csv(ws.path("metrics.csv"), result.history)
    summary = {
        "train_accuracy": result.history[-1].train_accuracy,
        "epochs_run": len(result.history),
        "param_count": result.net.param_count(),
    }
    if test is not None:
        summary["test_accuracy"] = nn.accuracy(result.net, test.inputs, test.labels)
    _write_json(ws.path("summary.json"), summary)


def _kind_attack_curve(cfg, ws, master):
    train_data, test = _load_datasets(cfg, master, need_test=True)
    result = _build_and_train(cfg, master, train_data)
    spec = _attack_spec(cfg)
    grid = parse_eps_grid(cfg.get("attack.eps_grid", "log:0.01:64:32"))
    rng = np.random.default_rng(derive_seed(master, "attack"))
    curve = attacks.adv_error_curve(result.net, test, spec, grid, rng)
    curve.write_csv(ws.path("curve.csv"))
    lo, hi = cfg.get_float("fit.lo"), cfg.get_float("fit.hi")
    if lo is not None and hi is not None:
        fit = logit_stats.fit_powerlaw(curve.epsilons, curve.adv_error, (lo, hi))
        logit_stats.write_fit_json(ws.path("fit.json"), fit)


def _kind_fit(cfg, ws, master):
    import csv

    curve_path = _resolve_path(cfg.get("fit.curve", required=True))
    if not curve_path.exists():
        raise ConfigError(f"fit.curve: {curve_path} does not exist")
    xs, ys = [], []
    with open(curve_path, newline="") as f:
        for row in csv.DictReader(f):
            xs.append(float(row["epsilon"]))
            ys.append(float(row["adv_error"]))
    window = (
        cfg.get_float("fit.lo", required=True),
        cfg.get_float("fit.hi", required=True),
    )
    fit = logit_stats.fit_powerlaw(xs, ys, window)
    logit_stats.write_fit_json(ws.path("fit.json"), fit)


def _kind_epsilon_hat(cfg, ws, master):
    train_data, test = _load_datasets(cfg, master, need_test=True)
    result = _build_and_train(cfg, master, train_data)
    eps_max = cfg.get_float("ehat.eps_max", response.DEFAULT_EPS_MAX)
    tol = cfg.get_float("ehat.tol", response.DEFAULT_TOL)
    mg = response.mean_gamma(result.net, test)
    records = response.epsilon_hat_records(result.net, test, eps_max, tol, mg)
    response.write_epsilon_hat_csv(ws.path("epsilon_hat.csv"), records)
    # eps_hat_true == 0 marks clean misclassifications; those stay out of
    # the estimator comparison along with absent values
    both = [
        r
        for r in records
        if r.eps_hat_true and r.eps_hat_linear and r.eps_hat_mf
    ]
    summary = {
        "n_examples": len(records),
        "n_with_all_estimates": len(both),
        "mean_gamma_top2_gap": mg.top2_gap,
    }
    if len(both) >= 3:
        t = [r.eps_hat_true for r in both]
        summary["spearman_linear_vs_true"] = logit_stats.spearman(
            [r.eps_hat_linear for r in both], t
        )
        summary["spearman_mf_vs_true"] = logit_stats.spearman(
            [r.eps_hat_mf for r in both], t
        )
    _write_json(ws.path("summary.json"), summary)


def _kind_delta_dist(cfg, ws, master):
    train_data, test = _load_datasets(cfg, master, need_test=False)
    result = _build_and_train(cfg, master, train_data)
    target = test if (test is not None and cfg.get("delta.split", "test") == "test") else train_data
    j_max = cfg.get_int("delta.j_max", 4)
    bins = cfg.get_int("delta.bins", 40)
    records = logit_stats.logit_diffs(result.net, target, j_max)
    logit_stats.write_deltas_csv(ws.path("deltas.csv"), records)
    densities, slopes = {}, {}
    for j in range(2, j_max + 1):
        samples = logit_stats.collect_deltas(records, j)
        d = logit_stats.tail_density(samples, bins)
        densities[j] = d
        try:
            window = logit_stats.small_gap_window(d, samples)
            fit = logit_stats.tail_exponent(d, window)
            slopes[str(j)] = fit.to_json_dict()
        except logit_stats.FitError as exc:
            slopes[str(j)] = {"error": str(exc)}
    logit_stats.write_density_csv(ws.path("density.csv"), densities)
    _write_json(ws.path("slopes.json"), slopes)


def _kind_oracle(cfg, ws, master):
    ocfg = logit_stats.OracleConfig(
        n_classes=cfg.get_int("oracle.classes", 10),
        base=cfg.get("oracle.base", "uniform"),
        n_samples=cfg.get_int("oracle.samples", 5_000_000),
        seed=derive_seed(master, "oracle"),
        j_max=cfg.get_int("oracle.j_max", 4),
    )
    report = logit_stats.oracle_report(ocfg)
    densities = {j: entry.pop("density") for j, entry in report.items()}
    logit_stats.write_density_csv(ws.path("density.csv"), densities)
    _write_json(ws.path("oracle.json"), {str(j): e for j, e in report.items()})


def _kind_transfer(cfg, ws, master):
    train_data, test = _load_datasets(cfg, master, need_test=True)
    source = _build_and_train(cfg, master, train_data, stage="-source")
    target = _build_and_train(cfg, master, train_data, stage="-target")
    spec = _attack_spec(cfg, required_eps=True)
    rng = np.random.default_rng(derive_seed(master, "attack"))
    white = attacks.transfer_eval(target.net, target.net, test, spec, rng)
    black = attacks.transfer_eval(source.net, target.net, test, spec, rng)
    _write_json(
        ws.path("transfer.json"),
        {
            "epsilon": spec.epsilon,
            "family": spec.family,
            "target_clean_accuracy": nn.accuracy(target.net, test.inputs, test.labels),
            "white_box_adv_accuracy": white,
            "black_box_adv_accuracy": black,
        },
    )


def compare_entropy_reg(cfg: Config, ws: Workspace, master: int, lambdas):
    """Train one model per entropy-penalty weight (identical seeds and
    architecture), then compare adversarial-accuracy curves and top-gap
    distributions."""
    lambdas = list(lambdas)
    if len(lambdas) < 2 or not any(lam == 0.0 for lam in lambdas):
        raise ConfigError("entropy comparison needs >= 2 lambda values including 0")
    train_data, test = _load_datasets(cfg, master, need_test=True)
    spec = _attack_spec(cfg)
    if "attack.family" not in cfg.pairs:
        spec = replace(spec, family="step_ll")
    grid = parse_eps_grid(cfg.get("attack.eps_grid", "log:0.5:64:16"))
    small = cfg.get_float("compare.small_delta", 1.0)
    report = {"lambdas": lambdas, "attack_family": spec.family, "per_lambda": {}}
    for i, lam in enumerate(lambdas):
        result = _build_and_train(cfg, master, train_data, entropy_lambda=lam)
        rng = np.random.default_rng(derive_seed(master, "attack"))
        curve = attacks.adv_error_curve(result.net, test, spec, grid, rng)
        curve.write_csv(ws.path(f"curve_lambda_{i}.csv"))
        deltas = logit_stats.collect_deltas(
            logit_stats.logit_diffs(result.net, test, 2), 2
        )
        report["per_lambda"][str(lam)] = {
            "clean_accuracy": curve.clean_accuracy,
            "adv_accuracy": [float(a) for a in curve.adv_accuracy],
            "epsilons": [float(e) for e in curve.epsilons],
            "median_delta_12": float(np.median(deltas)),
            "small_delta_mass": float(np.mean(deltas < small)),
        }
    _write_json(ws.path("compare.json"), report)
    return report


def _kind_entropy_compare(cfg, ws, master):
    raw = cfg.get("lambdas", required=True)
    lambdas = [float(tok) for tok in raw.split(",") if tok.strip()]
    compare_entropy_reg(cfg, ws, master, lambdas)


def _kind_shuffled_labels(cfg, ws, master):
    train_data, _ = _load_datasets(cfg, master, need_test=False)
    n = cfg.get_int("shuffle.n", 1000)
    subset = train_data.subset(n)
    shuffled = data_mod.shuffle_labels(subset, derive_seed(master, "shuffle"))
    result = _build_and_train(cfg, master, shuffled)
    _write_metrics_csv(ws.path("metrics.csv"), result.history)
    spec = _attack_spec(cfg)
    grid = parse_eps_grid(cfg.get("attack.eps_grid", "log:0.01:64:32"))
    rng = np.random.default_rng(derive_seed(master, "attack"))
    # the generalization probe evaluates attacks on the memorized train set
    curve = attacks.adv_error_curve(result.net, shuffled, spec, grid, rng)
    curve.write_csv(ws.path("curve.csv"))
    summary = {"final_train_accuracy": result.history[-1].train_accuracy}
    lo, hi = cfg.get_float("fit.lo"), cfg.get_float("fit.hi")
    if lo is not None and hi is not None:
        fit = logit_stats.fit_powerlaw(curve.epsilons, curve.adv_error, (lo, hi))
        logit_stats.write_fit_json(ws.path("fit.json"), fit)
        summary["exponent"] = fit.exponent
    _write_json(ws.path("summary.json"), summary)


_RUNNERS = {
    "train": _kind_train,
    "attack-curve": _kind_attack_curve,
    "fit": _kind_fit,
    "epsilon-hat": _kind_epsilon_hat,
    "delta-dist": _kind_delta_dist,
    "oracle": _kind_oracle,
    "transfer": _kind_transfer,
    "entropy-compare": _kind_entropy_compare,
    "shuffled-labels": _kind_shuffled_labels,
}


def run(kind: str, pairs: dict, seed=None, out=None) -> Path:
    """Validate and execute one experiment; returns the output directory."""
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; choose from {KINDS}")
    cfg = Config(pairs)
    cfg_kind = cfg.get("kind")
    if cfg_kind is not None and cfg_kind != kind:
        raise ConfigError(f"config is for kind {cfg_kind!r}, invoked as {kind!r}")
    cfg_seed = cfg.get_int("seed", 0)
    master = seed if seed is not None else cfg_seed
    out_raw = cfg.get("out")
    if out is None and out_raw is None:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    out_dir = Path(out) if out is not None else Path(out_raw)
    config_sha = hashlib.sha256(cfg.canonical_text().encode()).hexdigest()
    with Workspace(out_dir, kind, master, config_sha) as ws:
        _write_json(ws.dir / "config.json", cfg.to_json())
        _RUNNERS[kind](cfg, ws, master)
        cfg.reject_unknown()
    return out_dir


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="advscale",
        description="Adversarial-error scaling experiments (seeded, CSV artifacts).",
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", required=True, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default=None, help="output directory override")
    args = parser.parse_args(argv)
    try:
        pairs = parse_config_text(Path(args.config).read_text())
        out_dir = run(args.kind, pairs, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out_dir}/manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
