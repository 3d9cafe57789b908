"""Experiment configuration: a YAML file plus command-line overrides.

Every key is checked against the dataclass it feeds, so a typo is an error
that names the file and line rather than a silently ignored setting.

Example::

    seed: 3
    mode: pull            # pull | push | baseline
    coalesce: on
    transport: loopback   # loopback | socket
    out: results/
    workload:
      preset: arxiv       # or prompt/response blocks
      qps: 0.6
      num_requests: 60
    cluster:
      prefill_workers: 3
      decode_workers: 1
      decode:
        total_blocks: 12000
        compute: {b0: 0.02}
    sweep:
      prefill_workers: [1, 2, 3]
      decode_workers: [1, 2, 3]
"""

from __future__ import annotations

import dataclasses
import itertools
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .bench import BENCH_MODES, BenchConfig
from .simulator import LinkConfig, SimConfig
from .workers import WorkerConfig
from .workload import PRESETS, LengthDist, WorkloadSpec


class ConfigError(ValueError):
    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source, self.line, self.message = source, line, message
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# -- source positions ----------------------------------------------------------


class _Doc:
    """Parsed YAML with the line of every key, addressed by path."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            problem = getattr(exc, "problem", None) or str(exc)
            raise ConfigError(f"invalid YAML: {problem}", source,
                              mark.line + 1 if mark else None) from None
        if node is not None:
            self._index(node, ())
        if self.data is None:
            self.data = {}

    def _index(self, node, path: tuple) -> None:
        self.lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if isinstance(k, yaml.ScalarNode):
                    self.lines[path + (k.value,)] = k.start_mark.line + 1
                    self._index(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._index(v, path + (i,))

    def line(self, path: tuple) -> int | None:
        while path not in self.lines and path:
            path = path[:-1]
        return self.lines.get(path)

    def error(self, path: tuple, message: str) -> ConfigError:
        return ConfigError(message, self.source, self.line(path))


def _dotted(path: tuple) -> str:
    return ".".join(str(p) for p in path) or "top level"


# -- typed conversion ----------------------------------------------------------


def _mapping(doc: _Doc, value, path: tuple) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise doc.error(path, f"{_dotted(path)} must be a mapping")
    for k in value:
        if not isinstance(k, str):
            raise doc.error(path + (k,), f"keys must be strings, got {k!r}")
    return value


def _scalar(doc: _Doc, value, kind, path: tuple):
    if typing.get_origin(kind) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if value is None:
            return None
        kind = args[0]
    if kind is bool:
        if isinstance(value, bool):
            return value
        if value in ("on", "off"):
            return value == "on"
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # YAML 1.1 reads exponents without a sign, like 25e9, as strings.
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    raise doc.error(path, f"{_dotted(path)} must be {kind.__name__}, got {value!r}")


def _build(doc: _Doc, cls, value, path: tuple, skip: tuple[str, ...] = (), **fixed):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    data = _mapping(doc, value, path)
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip and f.name not in fixed]
    for k in data:
        if k not in names:
            raise doc.error(path + (k,), f"unknown key {k!r} in {_dotted(path)}; expected one of {names}")
    kwargs = dict(fixed)
    for k, v in data.items():
        kind = hints[k]
        if dataclasses.is_dataclass(kind):
            kwargs[k] = _build(doc, kind, v, path + (k,))
        else:
            kwargs[k] = _scalar(doc, v, kind, path + (k,))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise doc.error(path, f"{_dotted(path)}: {exc}") from None


# -- experiment ----------------------------------------------------------------


@dataclass(frozen=True)
class Sweep:
    prefill_workers: tuple[int, ...] = ()
    decode_workers: tuple[int, ...] = ()
    qps: tuple[float, ...] = ()
    mode: tuple[str, ...] = ()

    def points(self, base: SimConfig) -> list[SimConfig]:
        axes = (self.prefill_workers or (base.prefill_workers,),
                self.decode_workers or (base.decode_workers,),
                self.qps or (base.workload.qps,),
                self.mode or (base.mode,))
        return [replace(base, prefill_workers=p, decode_workers=d, mode=m,
                        workload=replace(base.workload, qps=q))
                for p, d, q, m in itertools.product(*axes)]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "pull"
    coalescing: bool = True
    transport: str = "loopback"
    out: str | None = None
    workload: WorkloadSpec = WorkloadSpec(1.0, 100)
    prefill_workers: int = 1
    decode_workers: int = 1
    prefill: WorkerConfig = WorkerConfig()
    decode: WorkerConfig = WorkerConfig()
    link: LinkConfig = LinkConfig()
    max_time: float = 1e6
    bench: BenchConfig = BenchConfig()
    oracle_scale: float = 1.0
    sweep: Sweep | None = None
    # Which of mode/coalescing were set explicitly, by file or flag.
    explicit: frozenset = field(default_factory=frozenset)
    # (source, line) of the setting that chose the mode, for error messages.
    mode_origin: tuple[str, int | None] = ("<defaults>", None)

    def sim_config(self) -> SimConfig:
        if self.mode == "baseline":
            raise ConfigError("mode baseline applies to bench-transfer only; simulate needs pull or push",
                              *self.mode_origin)
        return SimConfig(replace(self.workload, seed=self.seed), self.prefill_workers, self.decode_workers,
                         self.prefill, self.decode, self.mode, self.coalescing, self.transport, self.link,
                         self.max_time)

    def sim_points(self) -> list[SimConfig]:
        base = self.sim_config()
        return self.sweep.points(base) if self.sweep else [base]

    def bench_configs(self) -> list[BenchConfig]:
        """The bench runs to perform: the chosen mode, or every mode when none was chosen."""
        base = replace(self.bench, transport=self.transport, seed=self.seed)
        modes = [self.mode] if "mode" in self.explicit else list(BENCH_MODES)
        out = []
        for m in modes:
            if m == "baseline":
                out.append(replace(base, mode=m))
            elif "coalescing" in self.explicit:
                out.append(replace(base, mode=m, coalescing=self.coalescing))
            else:
                out.extend(replace(base, mode=m, coalescing=c) for c in (True, False))
        return out


_TOP = {"seed", "mode", "coalesce", "transport", "out", "workload", "cluster", "link", "max_time",
        "bench", "oracle", "sweep"}


def _length(doc: _Doc, value, path: tuple) -> LengthDist:
    return _build(doc, LengthDist, value, path)


def _workload(doc: _Doc, value, path: tuple) -> WorkloadSpec:
    data = dict(_mapping(doc, value, path))
    allowed = {"preset", "qps", "num_requests", "prompt", "response"}
    for k in data:
        if k not in allowed:
            raise doc.error(path + (k,), f"unknown key {k!r} in workload; expected one of {sorted(allowed)}")
    qps = _scalar(doc, data.get("qps", 1.0), float, path + ("qps",))
    n = _scalar(doc, data.get("num_requests", 100), int, path + ("num_requests",))
    try:
        if "preset" in data:
            name = _scalar(doc, data["preset"], str, path + ("preset",))
            if name not in PRESETS:
                raise doc.error(path + ("preset",), f"unknown preset {name!r}; known: {sorted(PRESETS)}")
            prompt, response = PRESETS[name]
        else:
            prompt, response = LengthDist.fixed(1024), LengthDist.fixed(64)
        if "prompt" in data:
            prompt = _length(doc, data["prompt"], path + ("prompt",))
        if "response" in data:
            response = _length(doc, data["response"], path + ("response",))
        return WorkloadSpec(qps, n, 0, prompt, response)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise doc.error(path, f"workload: {exc}") from None


def _choice(doc: _Doc, value, options, path: tuple) -> str:
    v = _scalar(doc, value, str, path)
    if v not in options:
        raise doc.error(path, f"{_dotted(path)} must be one of {list(options)}, got {v!r}")
    return v


def _list(doc: _Doc, value, kind, path: tuple) -> tuple:
    if not isinstance(value, list) or not value:
        raise doc.error(path, f"{_dotted(path)} must be a non-empty list")
    return tuple(_scalar(doc, v, kind, path + (i,)) for i, v in enumerate(value))


def parse_config(text: str, source: str = "<config>", overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Build an experiment from YAML ``text``; ``overrides`` come from command-line flags."""
    doc = _Doc(text, source)
    data = _mapping(doc, doc.data, ())
    for k in data:
        if k not in _TOP:
            raise doc.error((k,), f"unknown key {k!r}; expected one of {sorted(_TOP)}")
    kw: dict[str, Any] = {}
    explicit = set()
    if "seed" in data:
        kw["seed"] = _scalar(doc, data["seed"], int, ("seed",))
    if "mode" in data:
        kw["mode"] = _choice(doc, data["mode"], BENCH_MODES, ("mode",))
        kw["mode_origin"] = (source, doc.line(("mode",)))
        explicit.add("mode")
    if "coalesce" in data:
        kw["coalescing"] = _scalar(doc, data["coalesce"], bool, ("coalesce",))
        explicit.add("coalescing")
    if "transport" in data:
        kw["transport"] = _choice(doc, data["transport"], ("loopback", "socket"), ("transport",))
    if "out" in data:
        kw["out"] = _scalar(doc, data["out"], str, ("out",))
    if "max_time" in data:
        kw["max_time"] = _scalar(doc, data["max_time"], float, ("max_time",))
    if "workload" in data:
        kw["workload"] = _workload(doc, data["workload"], ("workload",))
    cluster = _mapping(doc, data.get("cluster"), ("cluster",))
    allowed = {"prefill_workers", "decode_workers", "prefill", "decode", "worker"}
    for k in cluster:
        if k not in allowed:
            raise doc.error(("cluster", k), f"unknown key {k!r} in cluster; expected one of {sorted(allowed)}")
    for k in ("prefill_workers", "decode_workers"):
        if k in cluster:
            kw[k] = _scalar(doc, cluster[k], int, ("cluster", k))
            if kw[k] < 1:
                raise doc.error(("cluster", k), f"cluster.{k} must be at least 1")
    # "worker" holds settings shared by both roles; role blocks override it key by key.
    shared = _mapping(doc, cluster.get("worker"), ("cluster", "worker"))
    _build(doc, WorkerConfig, shared, ("cluster", "worker"))
    for role in ("prefill", "decode"):
        own = _mapping(doc, cluster.get(role), ("cluster", role))
        merged = {**shared, **own}
        if isinstance(shared.get("compute"), dict) and isinstance(own.get("compute"), dict):
            merged["compute"] = {**shared["compute"], **own["compute"]}
        kw[role] = _build(doc, WorkerConfig, merged, ("cluster", role))
    if "link" in data:
        kw["link"] = _build(doc, LinkConfig, data["link"], ("link",))
    if "bench" in data:
        kw["bench"] = _build(doc, BenchConfig, data["bench"], ("bench",),
                             skip=("mode", "coalescing", "transport", "seed"))
    oracle = _mapping(doc, data.get("oracle"), ("oracle",))
    for k in oracle:
        if k != "scale":
            raise doc.error(("oracle", k), f"unknown key {k!r} in oracle; expected ['scale']")
    if "scale" in oracle:
        kw["oracle_scale"] = _scalar(doc, oracle["scale"], float, ("oracle", "scale"))
        if kw["oracle_scale"] <= 0:
            raise doc.error(("oracle", "scale"), "oracle.scale must be positive")
    if "sweep" in data:
        sw = _mapping(doc, data["sweep"], ("sweep",))
        kinds = {"prefill_workers": int, "decode_workers": int, "qps": float, "mode": str}
        for k in sw:
            if k not in kinds:
                raise doc.error(("sweep", k), f"unknown key {k!r} in sweep; expected one of {sorted(kinds)}")
        values = {k: _list(doc, v, kinds[k], ("sweep", k)) for k, v in sw.items()}
        for m in values.get("mode", ()):
            if m not in ("pull", "push"):
                raise doc.error(("sweep", "mode"), f"sweep.mode entries must be pull or push, got {m!r}")
        if any(v < 1 for k in ("prefill_workers", "decode_workers") for v in values.get(k, ())):
            raise doc.error(("sweep",), "sweep worker counts must be at least 1")
        if any(v <= 0 for v in values.get("qps", ())):
            raise doc.error(("sweep", "qps"), "sweep.qps entries must be positive")
        kw["sweep"] = Sweep(**values)

    for flag, value in (overrides or {}).items():
        if value is None:
            continue
        if flag == "coalesce":
            kw["coalescing"] = value == "on" if isinstance(value, str) else bool(value)
            explicit.add("coalescing")
        else:
            kw[flag] = value
            if flag == "mode":
                kw["mode_origin"] = ("--mode", None)
                explicit.add("mode")
    cfg = ExperimentConfig(**kw, explicit=frozenset(explicit))
    _check(cfg, doc)
    return cfg


def _check(cfg: ExperimentConfig, doc: _Doc) -> None:
    if cfg.mode == "baseline" and "coalescing" in cfg.explicit:
        raise doc.error(("coalesce",), "coalescing does not apply to the message baseline")
    for a in ("block_tokens", "heads", "head_dim", "element_size"):
        if getattr(cfg.prefill, a) != getattr(cfg.decode, a):
            raise doc.error(("cluster",), f"prefill and decode workers disagree on {a}")


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(p)) from None
    return parse_config(text, str(p), overrides)
