"""Command-line entry point: one subcommand per pipeline stage.

Every command writes into a run directory (``--out``) with fixed file names
and records what it did in ``manifest.json`` there: the full config, the
SHA-256 of every input and output, seeds and wall-clock time. Later stages
verify the hashes of the artifacts they consume and refuse to run on stale
ones. ``replay`` re-executes a manifest into a fresh directory.

Settings come from built-in defaults, then ``--config FILE`` (key=value
lines), then explicit flags.

Exit codes: 0 ok, 1 generic failure, 2 I/O or file format, 3 invalid input
or stale artifact, 4 numerical failure.
"""

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import classifier, diffusion, envsim, iql, knn
from .datasets import SOURCE_REAL, TARGET, concat, load_dataset, save_dataset
from .errors import FormatError, NonFiniteError, StaleArtifactError, ValidationError

EXIT_OK, EXIT_GENERIC, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3, 4

SCORES = "scores.csv"
SUMMARY = "summary.json"
MODEL = "model.dmcw"
GENERATED = "generated.dmcd"
GENERATED_SCORES = "generated_scores.csv"
POLICY = "policy.dmcw"
METRICS = "metrics.csv"
EVALUATION = "evaluation.csv"
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class RunConfig:
    src: str = ""
    tar: str = ""
    out: str = "run"
    seed: int = 0
    # scoring and selection
    k: int = 5
    xi: float = 50.0
    n_jobs: int = -1
    # diffusion
    diffusion_steps: int = 10_000
    diffusion_hidden: str = "256,256"
    diffusion_lr: float = 3e-4
    n_levels: int = 18
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho_sched: float = 7.0
    mask_prob: float = 0.25
    # generation
    count: int = 1_000_000
    guidance: float = 1.5
    kappa: float = 90.0
    sampler_steps: int = 18
    # policy learning
    rl_steps: int = 10_000
    hidden: str = "256,256"
    lr: float = 3e-4
    batch: int = 128
    gamma: float = 0.99
    polyak: float = 5e-3
    expectile: float = 0.7
    beta: float = 3.0
    lam: float = 0.1
    cvae_steps: int = 5000
    augment: bool = True
    baseline: bool = False
    log_every: int = 1000
    # evaluation / environments
    env: str = ""
    reference: str = ""
    policy: str = ""
    eval_episodes: int = 100
    eval_seed: int = 12345
    # diagnostics
    bins: int = 50
    classifier_epochs: int = 1
    # fixture collection
    shift: str = "gravity"
    gravity: float = 1.0
    n_axes: int = 2
    n_src: int = 10_000
    n_tar: int = 5000
    quality: str = "medium"


CONFIG_KEYS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, value):
    default = CONFIG_KEYS[name].default
    if isinstance(default, bool):
        low = str(value).strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValidationError(f"{name}: expected a boolean, got {value!r}")
        return low in ("1", "true", "yes")
    try:
        return type(default)(value)
    except ValueError:
        raise ValidationError(f"{name}: cannot parse {value!r} as {type(default).__name__}")


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    settings = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
        settings[key] = _coerce(key, value)
    return settings


def resolve_config(args):
    cfg = RunConfig()
    if args.config:
        cfg = replace(cfg, **read_config_file(args.config))
    flags = {k: v for k, v in vars(args).items() if k in CONFIG_KEYS and v is not None}
    cfg = replace(cfg, **{k: _coerce(k, v) for k, v in flags.items()})
    return cfg


def _hidden(text):
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ValidationError(f"hidden sizes must be comma-separated integers, got {text!r}")
    if not sizes or min(sizes) < 1:
        raise ValidationError(f"hidden sizes must be positive, got {text!r}")
    return sizes


# --------------------------------------------------------------------------- manifest


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, out):
        self.dir = Path(out)
        self.path = self.dir / MANIFEST
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"stages": {}, "order": []}

    def stage(self, name):
        return self.data["stages"].get(name)

    def output_hash(self, path):
        """Hash recorded for ``path`` by whichever stage produced it, or None."""
        key = str(Path(path).resolve())
        for st in self.data["stages"].values():
            if key in st["outputs"]:
                return st["outputs"][key]
        return None

    def verify(self, path):
        """Refuse an artifact whose bytes differ from what its producing stage recorded."""
        recorded = self.output_hash(path)
        if recorded is not None and recorded != sha256_file(path):
            raise StaleArtifactError(f"{path} was modified after it was produced (hash mismatch); rerun its stage")

    def verify_inputs_of(self, stage, paths):
        """The named stage must have been run on exactly these input files."""
        st = self.stage(stage)
        if st is None:
            raise ValidationError(f"stage {stage!r} has not been run in {self.dir}")
        for p in paths:
            key = str(Path(p).resolve())
            if key in st["inputs"] and st["inputs"][key] != sha256_file(p):
                raise StaleArtifactError(f"{p} changed since stage {stage!r} ran (hash mismatch); rerun it")

    def record(self, name, cfg, inputs, outputs, seeds, started, extra=None):
        entry = {
            "command": name,
            "config": asdict(cfg),
            "inputs": {str(Path(p).resolve()): sha256_file(p) for p in inputs},
            "outputs": {str(Path(p).resolve()): sha256_file(p) for p in outputs},
            "seeds": seeds,
            "wall_clock_s": round(time.time() - started, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if extra:
            entry.update(extra)
        self.data["stages"][name] = entry
        self.data["order"] = [s for s in self.data["order"] if s != name] + [name]
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _require(path, what):
    p = Path(path)
    if not str(path):
        raise ValidationError(f"--{what} is required")
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _load_pair(cfg):
    src = load_dataset(_require(cfg.src, "src"), origin=SOURCE_REAL)
    tar = load_dataset(_require(cfg.tar, "tar"), origin=TARGET)
    return src, tar


def _load_scores(out, src, k, manifest):
    path = _require(out / SCORES, "scores")
    manifest.verify(path)
    st = manifest.stage("score")
    if st is not None and st.get("src_fingerprint") != src.fingerprint():
        raise StaleArtifactError(f"{path} was computed for a different source dataset; rerun score")
    rho_min = st.get("rho_min") if st else None
    return knn.ScoreTable.load_csv(path, k, src.fingerprint(), rho_min)


# --------------------------------------------------------------------------- commands


def cmd_score(cfg):
    """Score every source row against the target set (writes scores.csv, summary.json)."""
    started = time.time()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tar = _load_pair(cfg)
    scorer = knn.fit_scorer(src, tar, cfg.k, cfg.n_jobs)
    table = scorer.score_table(src.fingerprint())
    table.save_csv(out / SCORES)
    qs = np.linspace(0, 100, 11)
    summary = {
        "kl_estimate": scorer.kl_divergence_, "k": cfg.k, "n_src": len(src), "n_tar": len(tar),
        "dim": src.features().shape[1], "rho_min": scorer.rho_min_, "n_floored": scorer.n_floored_,
        "weight_quantiles": {f"{q:g}": float(v) for q, v in zip(qs, np.percentile(table.weight, qs))},
        "threshold_xi": knn.quantile_threshold(table, cfg.xi), "xi": cfg.xi,
    }
    (out / SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True))
    Manifest(out).record("score", cfg, [cfg.src, cfg.tar], [out / SCORES, out / SUMMARY], {}, started,
                         {"src_fingerprint": src.fingerprint(), "rho_min": scorer.rho_min_})
    print(f"kl_estimate={summary['kl_estimate']!r} n_src={len(src)} n_tar={len(tar)} k={cfg.k}")
    print(f"scores -> {out / SCORES}")
    return EXIT_OK


def cmd_train_diffusion(cfg):
    """Train the score-conditioned diffusion model on the source set."""
    started = time.time()
    out = Path(cfg.out)
    man = Manifest(out)
    src = load_dataset(_require(cfg.src, "src"))
    man.verify_inputs_of("score", [cfg.src])
    table = _load_scores(out, src, cfg.k, man)
    model = diffusion.train_denoiser(
        src, table, steps=cfg.diffusion_steps, seed=cfg.seed, hidden=_hidden(cfg.diffusion_hidden),
        n_levels=cfg.n_levels, sigma_min=cfg.sigma_min, sigma_max=cfg.sigma_max, rho=cfg.rho_sched,
        mask_prob=cfg.mask_prob, lr=cfg.diffusion_lr)
    model.save(out / MODEL, layout=model.layout_)
    hold = model.holdout_history_
    man.record("train-diffusion", cfg, [cfg.src, out / SCORES], [out / MODEL, out / "model.json"],
               {"seed": cfg.seed}, started, {"holdout_loss": hold})
    print(f"holdout loss {hold[0][1]:.6g} -> {hold[-1][1]:.6g} over {cfg.diffusion_steps} steps")
    print(f"model -> {out / MODEL}")
    return EXIT_OK


def cmd_generate(cfg):
    """Generate guided source transitions and re-score them."""
    started = time.time()
    out = Path(cfg.out)
    man = Manifest(out)
    gcfg = diffusion.GuidanceConfig(cfg.guidance, cfg.kappa, cfg.count, cfg.sampler_steps)
    src, tar = _load_pair(cfg)
    man.verify_inputs_of("score", [cfg.src, cfg.tar])
    table = _load_scores(out, src, cfg.k, man)
    man.verify(_require(out / MODEL, "model"))
    model = diffusion.GuidedDiffusion.load(out / MODEL)
    augmented, _, gen_table = diffusion.augment_source(src, tar, table, model, gcfg, cfg.k, cfg.seed)
    gen = augmented.subset(np.arange(len(src), len(augmented)))
    save_dataset(gen, out / GENERATED)
    gen_table.save_csv(out / GENERATED_SCORES)
    man.record("generate", cfg, [cfg.src, cfg.tar, out / SCORES, out / MODEL],
               [out / GENERATED, out / GENERATED_SCORES], {"seed": cfg.seed}, started,
               {"mean_weight_generated": float(gen_table.weight.mean()),
                "mean_weight_real": float(table.weight.mean())})
    print(f"generated {len(gen)} rows; mean weight {gen_table.weight.mean():.4f} "
          f"(real source {table.weight.mean():.4f})")
    return EXIT_OK


def _eval_setup(cfg):
    if not cfg.env:
        return None
    spec = envsim.EnvSpec.from_text(_require(cfg.env, "env").read_text())
    ref = _reference(cfg, spec)
    return iql.EvalSetup(spec, ref, cfg.eval_episodes, cfg.eval_seed)


def _reference(cfg, spec):
    if cfg.reference:
        return envsim.EvalReference.from_json(_require(cfg.reference, "reference").read_text())
    return envsim.make_reference(spec)


def iql_config(cfg):
    h = _hidden(cfg.hidden)
    return iql.IQLConfig(hidden=h, gamma=cfg.gamma, expectile=cfg.expectile, beta=cfg.beta, lam=cfg.lam,
                         xi=cfg.xi, polyak=cfg.polyak, lr=cfg.lr, batch_size=cfg.batch,
                         cvae_steps=cfg.cvae_steps, cvae_hidden=h)


def cmd_train_policy(cfg):
    """Train the weighted IQL policy (or the pooled baseline with --baseline true)."""
    started = time.time()
    out = Path(cfg.out)
    man = Manifest(out)
    src, tar = _load_pair(cfg)
    inputs = [cfg.src, cfg.tar]
    table = None
    if not cfg.baseline:
        man.verify_inputs_of("score", [cfg.src, cfg.tar])
        table = _load_scores(out, src, cfg.k, man)
        inputs.append(out / SCORES)
        if cfg.augment and (out / GENERATED).exists():
            man.verify(out / GENERATED)
            man.verify(out / GENERATED_SCORES)
            gen = load_dataset(out / GENERATED, origin="source-generated")
            st = man.stage("score")
            gen_table = knn.ScoreTable.load_csv(out / GENERATED_SCORES, cfg.k, gen.fingerprint(),
                                                st.get("rho_min") if st else None)
            src = concat(src, gen)
            table = table.extend(gen_table, src.fingerprint())
            inputs += [out / GENERATED, out / GENERATED_SCORES]
    result = iql.train(src, table, tar, iql_config(cfg), cfg.rl_steps, cfg.seed,
                       evaluation=_eval_setup(cfg), log_every=cfg.log_every)
    result.bundle.save(out / POLICY, extra={"baseline": cfg.baseline, "n_source_rows": len(src)})
    iql.write_metrics(result.metrics, out / METRICS)
    man.record("train-policy", cfg, inputs, [out / POLICY, out / "policy.json", out / METRICS],
               {"seed": cfg.seed}, started)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {cfg.rl_steps} steps on {len(src)} source + {len(tar)} target rows; "
          f"last eval_ns={last.get('eval_ns', float('nan')):.2f}")
    return EXIT_OK


def cmd_evaluate(cfg):
    """Roll out a policy in the target environment and report its normalized score."""
    started = time.time()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out)
    spec = envsim.EnvSpec.from_text(_require(cfg.env, "env").read_text())
    ref = _reference(cfg, spec)
    inputs = [cfg.env] + ([cfg.reference] if cfg.reference else [])
    if cfg.policy == "expert":
        policy = envsim.ExpertPolicy(spec, approach=ref.expert_approach)
    elif cfg.policy == "random":
        policy = envsim.RandomPolicy(spec)
    else:
        path = _require(cfg.policy or out / POLICY, "policy")
        man.verify(path)
        policy = iql.PolicyBundle.load(path).act
        inputs.append(path)
    j, ns = envsim.evaluate(spec, policy, ref, cfg.eval_episodes, cfg.eval_seed)
    (out / EVALUATION).write_text(f"policy,episodes,return,ns\n{cfg.policy or POLICY},{cfg.eval_episodes},"
                                  f"{j:.9g},{ns:.9g}\n")
    man.record("evaluate", cfg, inputs, [out / EVALUATION], {"eval_seed": cfg.eval_seed}, started)
    print(f"return={j:.4f} ns={ns:.2f}")
    return EXIT_OK


def cmd_diagnose(cfg):
    """Write nearest-neighbor, classifier-probability and gap histograms."""
    started = time.time()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out)
    src, tar = _load_pair(cfg)
    nn_hist = knn.nn_distance_histogram(src, tar, cfg.bins, cfg.n_jobs)
    nn_hist.save_csv(out / "nn_distance_hist.csv")
    (out / "nn_distance_hist.json").write_text(json.dumps(nn_hist.meta, indent=2, sort_keys=True))
    cls = classifier.classifier_score(src, tar, cfg.classifier_epochs, cfg.seed)
    knn.probability_histogram(cls.p_sa, cls.p_sas).save_csv(out / "classifier_prob_hist.csv")
    cls.save_csv(out / "classifier_scores.csv")
    outputs = [out / "nn_distance_hist.csv", out / "nn_distance_hist.json", out / "classifier_prob_hist.csv",
               out / "classifier_scores.csv"]
    if (out / GENERATED_SCORES).exists():
        man.verify(out / GENERATED_SCORES)
        real = knn.score_source(src, tar, cfg.k, cfg.n_jobs)
        gen_rho = np.loadtxt(out / GENERATED_SCORES, delimiter=",", skiprows=1, usecols=1, ndmin=1)
        knn.gap_histogram(real.rho, gen_rho, cfg.bins).save_csv(out / "gap_hist.csv")
        outputs.append(out / "gap_hist.csv")
    man.record("diagnose", cfg, [cfg.src, cfg.tar], outputs, {"seed": cfg.seed}, started)
    for p in outputs:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_collect(cfg):
    """Build a source/target fixture pair on the point-mass family."""
    started = time.time()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.n_axes
    src_spec = envsim.EnvSpec(name="source", n_axes=n, gravity=cfg.gravity, joint_clip=(1.0,) * n,
                              goal=(1.0,) * n)
    if cfg.shift == "gravity":
        tar_spec = envsim.gravity_shift(src_spec)
    elif cfg.shift == "kinematic":
        tar_spec = envsim.kinematic_shift(src_spec)
    else:
        raise ValidationError(f"unknown shift {cfg.shift!r}; expected gravity or kinematic")
    ex_s = envsim.train_expert(src_spec)
    ex_t = envsim.train_expert(tar_spec)
    ref_s = envsim.make_reference(src_spec, ex_s)
    ref_t = envsim.make_reference(tar_spec, ex_t)
    src = envsim.collect_dataset(src_spec, cfg.quality, cfg.n_src, cfg.seed, ex_s, ref_s)
    tar = envsim.target_dataset(tar_spec, cfg.quality, cfg.n_tar, cfg.seed + 1, ex_t, ref_t)
    save_dataset(src.dataset, out / "src.dmcd")
    save_dataset(tar.dataset, out / "tar.dmcd")
    (out / "source_env.txt").write_text(src_spec.to_text())
    (out / "target_env.txt").write_text(tar_spec.to_text())
    (out / "reference.json").write_text(ref_t.to_json())
    outputs = [out / f for f in ("src.dmcd", "tar.dmcd", "source_env.txt", "target_env.txt", "reference.json")]
    Manifest(out).record("collect", cfg, [], outputs, {"seed": cfg.seed}, started,
                         {"source_return": src.mean_return, "target_return": tar.mean_return})
    print(f"source {len(src.dataset)} rows (mean return {src.mean_return:.2f}), "
          f"target {len(tar.dataset)} rows (mean return {tar.mean_return:.2f}) -> {out}")
    return EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "score": cmd_score,
    "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate,
    "train-policy": cmd_train_policy,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def cmd_replay(manifest_path, out):
    """Re-run every stage of a manifest into ``out`` and compare output hashes."""
    data = json.loads(Path(manifest_path).read_text())
    old_dir = Path(manifest_path).resolve().parent
    out = Path(out)
    mismatches = 0
    for name in data["order"]:
        st = data["stages"][name]
        cfg = RunConfig(**{**st["config"], "out": str(out)})
        # inputs that lived in the old run directory are re-created in the new one
        for field_name in ("src", "tar", "env", "reference", "policy"):
            val = getattr(cfg, field_name)
            if val and Path(val).resolve().parent == old_dir:
                cfg = replace(cfg, **{field_name: str(out / Path(val).name)})
        COMMANDS[st["command"]](cfg)
        for old_path, old_hash in st["outputs"].items():
            new_path = out / Path(old_path).name
            same = new_path.exists() and sha256_file(new_path) == old_hash
            mismatches += not same
            print(f"{'identical' if same else 'DIFFERS'}  {name}: {new_path.name}")
    return EXIT_OK if mismatches == 0 else EXIT_GENERIC


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossdomain",
        description="Cross-domain offline RL pipeline: k-NN gap scoring, score-guided diffusion "
                    "augmentation, and weighted IQL.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="key=value config file (flags override it)")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if isinstance(f.default, bool):
                p.add_argument(flag, dest=f.name, default=None, metavar="BOOL",
                               help=f"(default: {str(f.default).lower()})")
            else:
                p.add_argument(flag, dest=f.name, default=None, type=type(f.default),
                               help=f"(default: {f.default!r})")
    p = sub.add_parser("replay", help="re-run a manifest into a new directory and compare artifact hashes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args.manifest, args.out)
        return COMMANDS[args.command](resolve_config(args))
    except (ValidationError, ValueError) as exc:   # includes stale artifacts and unfitted models
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
