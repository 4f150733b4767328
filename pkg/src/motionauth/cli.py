"""``motionauth`` command line: data generation, training, evaluation, fusion and the service.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import dataclasses
import json
import os
import signal
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import datapipe as dp
from . import evalkit as ek
from . import fusion as fu
from . import trainer as tr
from .errors import BadSplitCounts, MotionAuthError
from .model import load_model, save_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_ADDRESS = "127.0.0.1:7700"
TOKEN_ENV = "MOTIONAUTH_OPERATOR_TOKEN"

# reduced-scale defaults; override any field through --config
DEFAULT_TRAIN_CONFIG = {
    "window_seconds": 1,
    "split_seed": 0,
    "split_counts": None,            # None: 35/3/7 for 45 users, scaled otherwise
    "train_windows_per_session": 30,
    "validation_windows_per_session": 100,
    "n_val_pairs": 2000,
    "siamese": {"epochs": 40, "windows_per_epoch": 1024},
    "decision": {"n_train_pairs": 10000, "n_test_pairs": 2000},
}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config_path: str = None
    config: dict = None
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    started_at: float = field(default_factory=time.time)
    finished_at: float = None

    def write(self, out_dir):
        self.finished_at = time.time()
        path = Path(out_dir) / "run_manifest.json"
        self.outputs.setdefault("run_manifest", str(path))
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


# -- shared data plumbing --------------------------------------------------------

def auto_split_counts(n_users):
    """Train/validation/test user counts: 35/3/7 at 45 users, the same proportions otherwise."""
    if n_users < 6:
        raise UsageError(f"need at least 6 users for a train/validation/test split, got {n_users}")
    val = max(2, round(n_users * 3 / 45))
    test = max(2, round(n_users * 7 / 45))
    return (n_users - val - test, val, test)


def _read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"data manifest not found: {path}")
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise UsageError(f"{path}: dataset manifest must be a JSON array")
    return entries


def load_sessions(manifest_path, users=None):
    """Resampled sessions from a dataset manifest, optionally for some users only."""
    base = Path(manifest_path).parent
    entries = _read_manifest(manifest_path)
    if users is not None:
        users = set(users)
        entries = [e for e in entries if str(e["user_id"]) in users]
    return [dp.resample(dp.session_from_manifest(e, base)) for e in entries]


def build_pool(sessions, users, window_seconds, per_session=None, seed=0):
    users = set(users)
    chosen = [s for s in sessions if s.user_id in users]
    if not chosen:
        raise UsageError("no sessions for the requested users")
    return dp.windows_from_sessions(chosen, window_seconds, per_session=per_session, seed=seed)


def session_windows(manifest_path, user_id, session_id, window_seconds):
    """Non-overlapping windows ``[K, 9W]`` of one session."""
    base = Path(manifest_path).parent
    for e in _read_manifest(manifest_path):
        if str(e["user_id"]) == user_id and str(e["session_id"]) == session_id:
            pool = dp.make_windows(dp.resample(dp.session_from_manifest(e, base)), window_seconds)
            return pool.values[::10]
    raise UsageError(f"no session {session_id!r} for user {user_id!r} in {manifest_path}")


def _merge(base, override):
    # top-level keys are checked here; the stage configs validate their own fields
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise UsageError(f"unknown config key {k!r}")
        out[k] = {**base[k], **v} if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out


def _load_config(path):
    if path is None:
        return dict(DEFAULT_TRAIN_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config not found: {p}")
    try:
        with open(p) as fh:
            raw = json.load(fh)
    except ValueError as exc:
        raise UsageError(f"{p}: not JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return _merge(DEFAULT_TRAIN_CONFIG, raw)


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args):
    if args.users < 2:
        raise UsageError("--users must be at least 2")
    if args.sessions_per_posture < 1 or args.duration < 2:
        raise UsageError("--sessions-per-posture must be >= 1 and --duration >= 2")
    out = _out_dir(args.out)
    man = RunManifest("gen-data", sys.argv[1:], seeds={"data": args.seed})
    entries = []
    for rec in dp.gen_dataset(args.users, args.sessions_per_posture, args.duration, seed=args.seed):
        entries.append(dp.export_session(rec, out / "sessions"))
    for e in entries:
        for kind in dp.SENSOR_ORDER:
            e[kind.value] = f"sessions/{e[kind.value]}"
    dp.write_manifest(out / "dataset.json", entries)
    man.outputs = {"dataset": str(out / "dataset.json"), "sessions": len(entries)}
    man.write(out)
    print(out / "dataset.json")


def train_from_config(sessions, cfg, modality=None):
    """Split users, build pools and run both stages; returns ``(model, reports, split)``."""
    users = sorted({s.user_id for s in sessions})
    counts = tuple(cfg["split_counts"]) if cfg["split_counts"] else auto_split_counts(len(users))
    try:
        split = dp.split_users(users, cfg["split_seed"], counts)
    except BadSplitCounts as exc:
        raise UsageError(str(exc)) from None
    w = cfg["window_seconds"]
    train_pool = build_pool(sessions, split.train_users, w, cfg["train_windows_per_session"], seed=1)
    val_pool = build_pool(sessions, split.validation_users, w, cfg["validation_windows_per_session"], seed=2)
    try:
        s_cfg = tr.SiameseTrainConfig(**cfg["siamese"])
        d_cfg = tr.DecisionTrainConfig(**cfg["decision"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None
    if modality and modality != "all":
        model, reports = tr.train_single_modality(train_pool, val_pool, modality, s_cfg, d_cfg,
                                                  n_val_pairs=cfg["n_val_pairs"])
    else:
        model, reports = tr.train_model(train_pool, val_pool, s_cfg, d_cfg, n_val_pairs=cfg["n_val_pairs"])
    model.metadata["split"] = split.to_dict()
    return model, reports, split


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["siamese"] = {**cfg["siamese"], "seed": args.seed}
        cfg["decision"] = {**cfg["decision"], "seed": args.seed}
    if args.modality not in dp.MODALITIES:
        raise UsageError(f"--modality must be one of {sorted(dp.MODALITIES)}")
    sessions = load_sessions(args.data)
    out = _out_dir(args.out)
    man = RunManifest("train", sys.argv[1:], config_path=args.config, config=cfg,
                      inputs={"data": str(args.data)})
    model, reports, split = train_from_config(sessions, cfg, args.modality)
    save_model(model, out / "model.bin")
    reports["siamese"].write(out / "siamese_report.json", out / "siamese_loss.csv")
    reports["decision"].write(out / "decision_report.json", out / "decision_loss.csv")
    _dump(dataclasses.asdict(reports["calibration"]), out / "calibration.json")
    _dump(split.to_dict(), out / "split.json")
    man.config = {**cfg, "siamese": reports["siamese"].config, "decision": reports["decision"].config}
    man.seeds = model.metadata["seeds"]
    man.outputs = {"model": str(out / "model.bin"), "calibration": dataclasses.asdict(reports["calibration"])}
    man.write(out)
    print(json.dumps({"model": str(out / "model.bin"), "threshold": model.threshold,
                      "validation_eer": reports["calibration"].eer}))


def _test_users(model, override):
    if override:
        return [u for u in override.split(",") if u]
    split = model.metadata.get("split")
    if not split:
        raise UsageError("the model carries no user split; pass --users")
    return split["test"]


def cmd_eval(args):
    if args.grid and (args.window is not None or args.shots is not None):
        raise UsageError("--grid and --window/--shots are exclusive")
    if not args.grid and (args.window is None or args.shots is None):
        raise UsageError("pass --grid, or both --window and --shots")
    models = {}
    for p in args.model:
        if not Path(p).is_file():
            raise UsageError(f"model not found: {p}")
        m = load_model(p)
        models[m.window_seconds] = m
    if not args.grid:
        if args.window not in models:
            raise UsageError(f"no model for {args.window} s windows among --model")
        models = {args.window: models[args.window]}
    first = next(iter(models.values()))
    users = _test_users(first, args.users)
    sessions = load_sessions(args.data, users)
    pools = {w: build_pool(sessions, users, w) for w in models}
    shots = ek.GRID_SHOTS if args.grid else (args.shots,)
    out = _out_dir(args.out)
    man = RunManifest("eval", sys.argv[1:], seeds={"eval": args.seed},
                      inputs={"models": list(args.model), "data": str(args.data), "users": users})
    grid = ek.eval_nshot_grid(models, pools, shots, seed=args.seed, repeats=args.repeats,
                              probes_per_user=args.probes_per_user)
    if args.grid:
        grid.write(out / "grid.csv", out / "report.json")
        man.outputs = {"grid": str(out / "grid.csv"), "report": str(out / "report.json")}
        print(grid.to_csv(), end="")
    else:
        cell = grid.get(args.window, args.shots)
        with open(out / "report.csv", "w") as fh:
            fh.write("window_seconds,n_shot,f1,far,frr,auc,eer,threshold\n")
            m = cell.metrics
            fh.write(f"{args.window},{args.shots},{m['f1']:.4f},{m['far']:.4f},{m['frr']:.4f},"
                     f"{m['auc']:.4f},{m['eer']:.4f},{cell.threshold:.6f}\n")
        _dump(grid.to_json(), out / "report.json")
        man.outputs = {"report": str(out / "report.csv"), "metrics": m}
        print(json.dumps({"window_seconds": args.window, "n_shot": args.shots, **m}))
    man.write(out)


def matcher_scores(models, pool, n_pairs, seed):
    """One score column per model over the same sampled pairs."""
    pairs = dp.sample_pairs(pool, n_pairs, seed)
    cols = [tr.pair_scores(m, pairs) for m in models]
    return fu.ScoreMatrix(np.column_stack(cols), pairs.labels)


def cmd_fuse(args):
    if (args.scores is None) == (args.models is None):
        raise UsageError("pass either --scores or --models with --data")
    out = _out_dir(args.out)
    man = RunManifest("fuse", sys.argv[1:], seeds={"fuse": args.seed})
    if args.scores is not None:
        for p in [args.scores] + ([args.train_scores] if args.train_scores else []):
            if not Path(p).is_file():
                raise UsageError(f"score file not found: {p}")
        try:
            test = fu.read_scores(args.scores)
            train = fu.read_scores(args.train_scores) if args.train_scores else None
        except fu.MalformedScoreFile as exc:
            raise UsageError(str(exc)) from None
        if train is None:
            # seeded half/half split of one file into fitting and evaluation trials
            perm = np.random.default_rng(args.seed).permutation(len(test))
            a, b = perm[: len(perm) // 2], perm[len(perm) // 2:]
            train = fu.ScoreMatrix(test.scores[a], test.labels[a], test.names, [test.trial_ids[i] for i in a])
            test = fu.ScoreMatrix(test.scores[b], test.labels[b], test.names, [test.trial_ids[i] for i in b])
        man.inputs = {"scores": args.scores, "train_scores": args.train_scores}
    else:
        if args.data is None or len(args.models) != 3:
            raise UsageError("--models needs the accelerometer, gyroscope and magnetometer models and --data")
        models = [load_model(p) for p in args.models]
        split = models[0].metadata.get("split")
        if not split:
            raise UsageError("the first model carries no user split")
        w = models[0].window_seconds
        # fusers are fit on validation users: the embeddings never saw them, unlike training users
        sessions = load_sessions(args.data, split["validation"] + split["test"])
        train = matcher_scores(models, build_pool(sessions, split["validation"], w),
                                args.train_pairs, args.seed)
        test = matcher_scores(models, build_pool(sessions, split["test"], w), args.pairs, args.seed + 1)
        train.write_csv(out / "train_scores.csv")
        test.write_csv(out / "test_scores.csv")
        man.inputs = {"models": list(args.models), "data": str(args.data)}
    methods = fu.METHODS if args.method == "all" else (args.method,)
    report = fu.eval_fusion(train, test, methods, seed=args.seed)
    report.write_csv(out / "fusion.csv")
    singles = {n: float(ek.eer(test.scores[:, j], test.labels)[0]) for j, n in enumerate(test.names)}
    _dump({"rows": report.rows, "table": report.table, "single_matcher_eer": singles}, out / "fusion.json")
    man.outputs = {"report": str(out / "fusion.csv"), "rows": report.rows}
    man.write(out)
    print((out / "fusion.csv").read_text(), end="")


def cmd_serve(args):
    from .authsvc import AuthService, Store, serve
    if not Path(args.model).is_file():
        raise UsageError(f"model not found: {args.model}")
    host, port = _address(args.listen)
    token = args.operator_token or os.environ.get(TOKEN_ENV)
    service = AuthService(load_model(args.model), Store(args.store), operator_token=token)
    if args.out:
        RunManifest("serve", sys.argv[1:], inputs={"model": args.model, "store": args.store},
                    outputs={"address": f"{host}:{port}"}).write(_out_dir(args.out))

    def ready(h, p):
        print(json.dumps({"listening": f"{h}:{p}"}), flush=True)

    def on_term(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, on_term)
    serve((host, port), service, args.max_frame, on_ready=ready)


def _address(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"address must be HOST:PORT, got {text!r}")
    return host, int(port)


def _client_call(args, fn):
    from .authsvc import AuthClient, ServiceError
    host, port = _address(args.connect)
    try:
        with AuthClient(host, port) as c:
            result = fn(c)
    except ServiceError as exc:
        print(json.dumps({"ok": False, "error": {"code": exc.code, "message": exc.message}}))
        if args.out:
            RunManifest(args.command, sys.argv[1:], outputs={"error": exc.code}).write(_out_dir(args.out))
        return EXIT_FAIL
    print(json.dumps({"ok": True, **result}))
    if args.out:
        RunManifest(args.command, sys.argv[1:], outputs=result).write(_out_dir(args.out))
    return EXIT_OK


def cmd_enroll(args):
    wins = session_windows(args.data, args.user, args.session, args.window)
    chosen = wins[args.start:args.start + args.shots]
    if len(chosen) < args.shots:
        raise UsageError(f"session has {len(wins)} non-overlapping windows; cannot take {args.shots} from {args.start}")
    return _client_call(args, lambda c: c.enroll(args.user, chosen))


def cmd_verify(args):
    wins = session_windows(args.data, args.session_user or args.user, args.session, args.window)
    if not 0 <= args.index < len(wins):
        raise UsageError(f"--index must be in [0, {len(wins)})")
    return _client_call(args, lambda c: c.verify(args.user, wins[args.index]))


def cmd_reset_fallback(args):
    token = args.token or os.environ.get(TOKEN_ENV)
    return _client_call(args, lambda c: c.reset_fallback(args.user, token))


# -- argument parsing ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="motionauth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"motionauth {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic multi-user dataset")
    g.add_argument("--users", type=int, default=45, help="number of users (>= 2)")
    g.add_argument("--sessions-per-posture", type=int, default=5, help="sessions per posture per user")
    g.add_argument("--duration", type=float, default=90, help="session length in seconds")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")
    g.add_argument("--out", required=True, help="output directory (CSVs, dataset.json, run manifest)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training plus threshold calibration")
    t.add_argument("--data", required=True, help="dataset manifest (dataset.json)")
    t.add_argument("--config", help="JSON config overriding the defaults (see README)")
    t.add_argument("--modality", default="all", help="all, accelerometer, gyroscope or magnetometer")
    t.add_argument("--seed", type=int, help="seed for both training stages (overrides the config)")
    t.add_argument("--out", required=True, help="output directory (model.bin, reports, run manifest)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="n-shot x window-length evaluation on the test users")
    e.add_argument("--model", action="append", required=True, help="model file; repeat for several window lengths")
    e.add_argument("--data", required=True, help="dataset manifest")
    e.add_argument("--grid", action="store_true", help="evaluate 1-5 shots for every given model")
    e.add_argument("--window", type=int, help="single cell: window length in seconds")
    e.add_argument("--shots", type=int, help="single cell: enrollment shots")
    e.add_argument("--users", help="comma-separated test users (default: the model's test split)")
    e.add_argument("--seed", type=int, default=0, help="trial sampling seed")
    e.add_argument("--repeats", type=int, default=1, help="repeats per cell")
    e.add_argument("--probes-per-user", type=int, default=100, help="genuine probes per test user")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="score-level fusion report")
    f.add_argument("--scores", help="CSV trial_id,label,score_acc,score_gyr,score_mag (evaluation trials)")
    f.add_argument("--train-scores", help="CSV of fitting trials (default: half of --scores)")
    f.add_argument("--models", nargs=3, metavar=("ACC", "GYR", "MAG"), help="single-modality models to score pairs with")
    f.add_argument("--data", help="dataset manifest, with --models")
    f.add_argument("--pairs", type=int, default=10000, help="evaluation pairs from test users, with --models")
    f.add_argument("--train-pairs", type=int, default=50000, help="fitting pairs from validation users, with --models")
    f.add_argument("--method", default="all", choices=("all",) + fu.METHODS, help="fusion method")
    f.add_argument("--seed", type=int, default=0, help="split / pair sampling / fitting seed")
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fuse)

    s = sub.add_parser("serve", help="run the verification service")
    s.add_argument("--model", required=True, help="calibrated model file")
    s.add_argument("--store", required=True, help="journal file (created if missing)")
    s.add_argument("--listen", default=DEFAULT_ADDRESS, help="HOST:PORT")
    s.add_argument("--max-frame", type=int, default=1 << 20, help="largest accepted frame in bytes")
    s.add_argument("--operator-token", help=f"token for reset-fallback (default: ${TOKEN_ENV})")
    s.add_argument("--out", help="directory for the run manifest")
    s.set_defaults(func=cmd_serve)

    for name, fn, helptext in [("enroll", cmd_enroll, "enroll a user from a recorded session"),
                               ("verify", cmd_verify, "verify one window of a recorded session"),
                               ("reset-fallback", cmd_reset_fallback, "clear a user's fallback status")]:
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--connect", default=DEFAULT_ADDRESS, help="service HOST:PORT")
        c.add_argument("--user", required=True, help="user id")
        c.add_argument("--out", help="directory for the run manifest")
        if name == "reset-fallback":
            c.add_argument("--token", help=f"operator token (default: ${TOKEN_ENV})")
        else:
            c.add_argument("--data", required=True, help="dataset manifest")
            c.add_argument("--session", required=True, help="session id to take windows from")
            c.add_argument("--window", type=int, default=1, help="window length in seconds")
        if name == "enroll":
            c.add_argument("--shots", type=int, default=3, help="number of enrollment windows")
            c.add_argument("--start", type=int, default=0, help="first non-overlapping window to use")
        if name == "verify":
            c.add_argument("--index", type=int, default=0, help="non-overlapping window index")
            c.add_argument("--session-user", help="owner of --session when probing as someone else")
        c.set_defaults(func=fn)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MotionAuthError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
