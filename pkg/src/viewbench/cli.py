"""Command-line entry points: annotate, evaluate, split, reference, serve, report, defaults."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import socket
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .difficulty.annotate import DifficultyAnnotation, annotate_object
from .difficulty.saturation import DEFAULT_SCHEDULE
from .difficulty.splits import balanced_train_sample, histogram, raw_sample, stratified_test_split
from .episode import compute_reference, read_trace, time_bin, trace_csv
from .objects import ObjectStore
from .planners import PlannerSpec, run_local
from .server.schemas import ProtocolModel

log = logging.getLogger("viewbench")

SYNTHETIC_KINDS = ("sphere", "cube", "torus", "open_box")
AGGREGATE_HEADER = ["protocol", "planner", "episodes", "views", "nsc", "sc", "path_cost", "planning_time",
                    "time_bin"]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _safe_name(v: str) -> str:
    if not v or "__" in v or any(c in v for c in "/\\ "):
        raise ValueError(f"name {v!r} must be non-empty, without spaces, slashes or '__'")
    return v


class PlannerModel(Strict):
    name: str
    kind: Literal["rse", "oracle", "random_tsp", "scp", "mcp"]
    lam: float = Field(0.25, ge=0)
    k: int | None = Field(None, ge=1)
    policy: Literal["next-best", "terminate"] = "next-best"
    source: Literal["oracle", "estimated"] = "oracle"
    seed: int = 0

    @field_validator("name")
    @classmethod
    def _name(cls, v):
        return _safe_name(v)

    def spec(self) -> PlannerSpec:
        return PlannerSpec(**self.model_dump())


class AnnotationModel(Strict):
    r: float = Field(0.02, gt=0)
    protocol_views: int = Field(128, ge=2)
    schedule: list[int] = list(DEFAULT_SCHEDULE)
    seed: int = 0
    epsilon: float = Field(0.01, gt=0)
    window: int = Field(2, ge=1)
    time_budget: float = Field(30.0, gt=0)


class SplitModel(Strict):
    quota: int = Field(10, ge=1)
    mode: Literal["stratified", "balanced", "raw"] = "stratified"
    seed: int = 0
    edges: list[float] = [1, 5, 10, 20, 40, 129]


def _default_planners() -> list[PlannerModel]:
    return [PlannerModel(name="rse", kind="rse", lam=0.0), PlannerModel(name="rse-mov", kind="rse", lam=0.25),
            PlannerModel(name="random-tsp", kind="random_tsp"), PlannerModel(name="mcp", kind="mcp"),
            PlannerModel(name="scp", kind="scp"), PlannerModel(name="oracle", kind="oracle")]


class RunConfig(Strict):
    """One experiment: objects, protocols, planners, output directory."""
    objects: str | None = None
    synthetic: list[Literal["sphere", "cube", "torus", "open_box"]] = list(SYNTHETIC_KINDS)
    output: str = "runs/default"
    protocols: dict[str, ProtocolModel] = {"whole-k30": ProtocolModel()}
    planners: list[PlannerModel] = Field(default_factory=_default_planners)
    annotation: AnnotationModel = AnnotationModel()
    split: SplitModel = SplitModel()
    timing: Literal["wall", "off"] = "wall"
    workers: int = Field(1, ge=1)
    server: str | None = None

    @field_validator("protocols")
    @classmethod
    def _protocol_names(cls, v):
        for name in v:
            _safe_name(name)
        return v

    @field_validator("planners")
    @classmethod
    def _unique_planners(cls, v):
        names = [p.name for p in v]
        if len(set(names)) != len(names):
            raise ValueError("planner names must be unique")
        return v


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate(json.loads(Path(path).read_text()))


def build_store(cfg: RunConfig) -> tuple[ObjectStore, list[tuple[str, str]]]:
    store = ObjectStore()
    failures = []
    if cfg.objects:
        failures = store.add_directory(cfg.objects)
    else:
        for kind in cfg.synthetic:
            store.add_synthetic(kind, kind)
    return store, failures


_STORES: dict = {}


def _shared_store(cfg: RunConfig) -> ObjectStore:
    """Per-process store reused across cells so derived assets are built once per object."""
    key = (cfg.objects, tuple(cfg.synthetic))
    if key not in _STORES:
        _STORES[key] = build_store(cfg)[0]
    return _STORES[key]


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# annotate

def read_annotations(path: Path) -> list[DifficultyAnnotation]:
    if not path.exists():
        return []
    return [DifficultyAnnotation.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def _annotate_one(cfg_json: str, object_id: str) -> str:
    cfg = RunConfig.model_validate_json(cfg_json)
    store = _shared_store(cfg)
    a = cfg.annotation
    ann = annotate_object(store.get(object_id), r=a.r, protocol_views=a.protocol_views, schedule=tuple(a.schedule),
                          seed=a.seed, time_budget=a.time_budget, epsilon=a.epsilon, window=a.window)
    return ann.to_json()


def cmd_annotate(cfg: RunConfig) -> dict:
    out = Path(cfg.output)
    path = out / "annotations.jsonl"
    store, failures = build_store(cfg)
    if len(store) == 0:
        raise SystemExit("no readable meshes to annotate")
    done = {a.object_id for a in read_annotations(path)}
    todo = [i for i in store.ids() if i not in done]
    log.info("annotating %d objects (%d already done)", len(todo), len(done))
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_json = cfg.model_dump_json()
    with open(path, "a") as fh:
        for object_id, line in _map(cfg.workers, _annotate_one, [(cfg_json, i) for i in todo]):
            if isinstance(line, Exception):
                failures.append((object_id, str(line)))
                continue
            fh.write(line + "\n")
            fh.flush()
    anns = sorted(read_annotations(path), key=lambda a: a.object_id)
    _write_atomic(path, "".join(a.to_json() + "\n" for a in anns))
    summary = {
        "objects": len(anns),
        "histogram": {str(k): v for k, v in histogram(anns).items()},
        "slow_saturation": sorted(a.object_id for a in anns if a.slow_saturation),
        "failures": [{"object": f, "error": e} for f, e in sorted(failures)],
    }
    _write_atomic(out / "annotation_summary.json", _dump(summary))
    return summary


def _map(workers: int, fn, arglist):
    """Yield (first arg after config, result or exception) in input order."""
    if workers <= 1 or len(arglist) <= 1:
        for args in arglist:
            try:
                yield args[1], fn(*args)
            except Exception as exc:  # recorded per item, the batch continues
                log.exception("failed on %s", args[1])
                yield args[1], exc
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for args in arglist]
        for args, fut in zip(arglist, futures):
            try:
                yield args[1], fut.result()
            except Exception as exc:
                log.error("failed on %s: %s", args[1], exc)
                yield args[1], exc


# ---------------------------------------------------------------------------
# reference

def _reference_one(cfg_json: str, object_id: str) -> dict:
    cfg = RunConfig.model_validate_json(cfg_json)
    assets = _shared_store(cfg).get(object_id)
    return {name: compute_reference(assets, proto.to_config()) for name, proto in sorted(cfg.protocols.items())}


def cmd_reference(cfg: RunConfig) -> dict:
    store, failures = build_store(cfg)
    cfg_json = cfg.model_dump_json()
    table: dict[str, dict[str, float]] = {name: {} for name in sorted(cfg.protocols)}
    for object_id, res in _map(cfg.workers, _reference_one, [(cfg_json, i) for i in store.ids()]):
        if isinstance(res, Exception):
            failures.append((object_id, str(res)))
            continue
        for name, value in res.items():
            table[name][object_id] = value
    _write_atomic(Path(cfg.output) / "references.json", _dump(table))
    return table


# ---------------------------------------------------------------------------
# evaluate

def cell_stem(protocol: str, planner: str, object_id: str) -> str:
    return f"{protocol}__{planner}__{object_id}"


def _evaluate_cell(cfg_json: str, cell: tuple[str, str, str]) -> tuple[str, dict]:
    cfg = RunConfig.model_validate_json(cfg_json)
    protocol, planner_name, object_id = cell
    planner = next(p for p in cfg.planners if p.name == planner_name)
    config = cfg.protocols[protocol].to_config()
    if cfg.server:
        from .planners import make_planner, oracle_matrix
        from .server.client import EvaluationClient, run_remote
        oracle = None
        if make_planner(planner.spec()).needs_oracle:
            oracle = oracle_matrix(_shared_store(cfg).get(object_id), config)
        client = EvaluationClient(cfg.server)
        try:
            records, report = run_remote(client, object_id, planner.spec(), config, oracle, cfg.timing)
        finally:
            client.close()
    else:
        records, report = run_local(_shared_store(cfg).get(object_id), planner.spec(), config, timing=cfg.timing)
    return trace_csv(records), report.to_dict()


def cmd_evaluate(cfg: RunConfig) -> list[dict]:
    out = Path(cfg.output)
    store, failures = build_store(cfg)
    for name, err in failures:
        log.warning("skipping unreadable mesh %s: %s", name, err)
    cells = [(proto, p.name, obj) for proto in sorted(cfg.protocols) for p in cfg.planners for obj in store.ids()]
    cfg_json = cfg.model_dump_json()
    errors = []
    for cell, res in _map(cfg.workers, _evaluate_cell, [(cfg_json, c) for c in cells]):
        stem = cell_stem(*cell)
        if isinstance(res, Exception):
            errors.append({"cell": stem, "error": f"{type(res).__name__}: {res}"})
            continue
        trace, report = res
        _write_atomic(out / "traces" / f"{stem}.csv", trace)
        _write_atomic(out / "reports" / f"{stem}.json", _dump(report))
    _write_atomic(out / "failures.json", _dump(errors))
    return cmd_report(out)


def aggregate_traces(trace_dir: Path) -> list[dict]:
    """Per (protocol, planner): means over episodes of the last-step NSC/SC and summed path and time."""
    groups: dict[tuple[str, str], list] = {}
    for path in sorted(Path(trace_dir).glob("*.csv")):
        parts = path.stem.split("__")
        if len(parts) != 3:
            continue
        recs = read_trace(path.read_text())
        if recs:
            groups.setdefault((parts[0], parts[1]), []).append(recs)
    rows = []
    for (protocol, planner), episodes in sorted(groups.items()):
        n = len(episodes)
        t = sum(sum(r.time for r in e) for e in episodes) / n
        rows.append({
            "protocol": protocol, "planner": planner, "episodes": n,
            "views": sum(len(e) for e in episodes) / n,
            "nsc": sum(e[-1].nsc for e in episodes) / n,
            "sc": sum(e[-1].sc for e in episodes) / n,
            "path_cost": sum(math.fsum(r.path_increment for r in e) for e in episodes) / n,
            "planning_time": t, "time_bin": time_bin(t),
        })
    return rows


def _table(rows: list[dict], header=AGGREGATE_HEADER) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def rank_rows(rows: list[dict]) -> tuple[list[dict], list[dict]]:
    """NSC ranking per protocol, and the path-cost view restricted to NSC >= 0.95."""
    by_nsc = sorted(rows, key=lambda r: (r["protocol"], -r["nsc"], r["path_cost"], r["planner"]))
    by_path = sorted((r for r in rows if r["nsc"] >= 0.95),
                     key=lambda r: (r["protocol"], r["path_cost"], -r["nsc"], r["planner"]))
    return by_nsc, by_path


def cmd_report(run_dir) -> list[dict]:
    run_dir = Path(run_dir)
    rows = aggregate_traces(run_dir / "traces")
    by_nsc, by_path = rank_rows(rows)
    _write_atomic(run_dir / "aggregate.csv", _table(rows))
    _write_atomic(run_dir / "ranking_nsc.csv", _table(by_nsc))
    _write_atomic(run_dir / "ranking_path_cost.csv", _table(by_path))
    return rows


def format_rows(rows: list[dict]) -> str:
    lines = [f"{'protocol':<14}{'planner':<14}{'#views':>8}{'NSC':>9}{'SC':>9}{'path':>9}  time"]
    for r in rows:
        lines.append(f"{r['protocol']:<14}{r['planner']:<14}{r['views']:>8.1f}{r['nsc']:>9.4f}{r['sc']:>9.4f}"
                     f"{r['path_cost']:>9.2f}  {r['time_bin']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# split

def cmd_split(annotations_path: Path, split: SplitModel, out: Path, exclude: Path | None = None) -> dict:
    anns = read_annotations(Path(annotations_path))
    if not anns:
        raise SystemExit(f"no annotations in {annotations_path}")
    slow = sorted(a.object_id for a in anns if a.slow_saturation)
    pool = [a for a in anns if not a.slow_saturation]
    if exclude is not None:
        banned = set(json.loads(Path(exclude).read_text()))
        pool = [a for a in pool if a.object_id not in banned]
    files = {}
    if split.mode == "stratified":
        test, train = stratified_test_split(pool, split.quota, split.seed)
        files = {"test.json": test, "train.json": train}
    elif split.mode == "balanced":
        files = {"balanced.json": balanced_train_sample(pool, split.quota, split.edges, split.seed)}
    else:
        files = {"raw.json": raw_sample(pool, split.quota, split.seed)}
    files["slow.json"] = slow
    for name, ids in files.items():
        _write_atomic(Path(out) / name, json.dumps(ids, indent=1) + "\n")
    return files


# ---------------------------------------------------------------------------
# serve

def cmd_serve(cfg: RunConfig, host: str, port: int):
    import uvicorn

    from .server.app import create_app
    store, failures = build_store(cfg)
    for name, err in failures:
        log.warning("skipping unreadable mesh %s: %s", name, err)
    if len(store) == 0:
        raise SystemExit("no objects to serve")
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        try:
            s.bind((host, port))
        except OSError as exc:
            raise SystemExit(f"cannot listen on {host}:{port}: {exc}") from None
    log.info("serving %d objects on %s:%d", len(store), host, port)
    uvicorn.run(create_app(store), host=host, port=port, log_level="info")


# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration (see `defaults`)")
        sp.add_argument("--objects", help="mesh directory; overrides the config")
        sp.add_argument("--output", help="output directory; overrides the config")
        sp.add_argument("--workers", type=int, help="parallel worker processes")
        return sp

    with_config(sub.add_parser("annotate", help="difficulty annotations for every mesh"))
    ev = with_config(sub.add_parser("evaluate", help="run every object x planner x protocol cell"))
    ev.add_argument("--server", help="evaluate against a running service at this URL")
    ev.add_argument("--timing", choices=["wall", "off"])
    with_config(sub.add_parser("reference", help="dense reference coverage per object and protocol"))

    sp = sub.add_parser("split", help="difficulty-aware splits from an annotation file")
    sp.add_argument("annotations")
    sp.add_argument("--quota", type=int, required=True)
    sp.add_argument("--mode", choices=["stratified", "balanced", "raw"], default="stratified")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--edges", type=float, nargs="+")
    sp.add_argument("--exclude", help="JSON id list to keep out of the sample")
    sp.add_argument("--out", required=True)

    sv = with_config(sub.add_parser("serve", help="run the evaluation service"))
    sv.add_argument("--host", default=os.environ.get("VIEWBENCH_HOST", "127.0.0.1"))
    sv.add_argument("--port", type=int, default=int(os.environ.get("VIEWBENCH_PORT", "8000")))

    rp = sub.add_parser("report", help="re-aggregate a run directory from its traces")
    rp.add_argument("run_dir")

    sub.add_parser("defaults", help="print the default run configuration")
    return p


def _resolve(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
        updates = {}
        if getattr(args, "objects", None):
            updates["objects"] = args.objects
        for key in ("output", "workers", "server", "timing"):
            if getattr(args, key, None) is not None:
                updates[key] = getattr(args, key)
        return RunConfig.model_validate({**cfg.model_dump(), **updates})
    except (ValidationError, json.JSONDecodeError, OSError) as exc:
        raise SystemExit(f"invalid configuration: {exc}") from None


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "defaults":
        print(RunConfig().model_dump_json(indent=2))
    elif args.command == "annotate":
        summary = cmd_annotate(_resolve(args))
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif args.command == "reference":
        print(json.dumps(cmd_reference(_resolve(args)), indent=2, sort_keys=True))
    elif args.command == "evaluate":
        print(format_rows(cmd_evaluate(_resolve(args))))
    elif args.command == "report":
        print(format_rows(cmd_report(args.run_dir)))
    elif args.command == "split":
        split = SplitModel(quota=args.quota, mode=args.mode, seed=args.seed,
                           **({"edges": args.edges} if args.edges else {}))
        try:
            files = cmd_split(Path(args.annotations), split, Path(args.out),
                              Path(args.exclude) if args.exclude else None)
        except ValueError as exc:
            raise SystemExit(str(exc)) from None
        for name, ids in files.items():
            print(f"{name}: {len(ids)} ids")
    elif args.command == "serve":
        cmd_serve(_resolve(args), args.host, args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
