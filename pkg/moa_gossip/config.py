"""YAML 設定ファイルの読み込み・検証・正規形への書き出し。

最小構成は次の通り（残りはデフォルトが入る）::

    n: 4
    k: 1
    M: 1
    lambda: 0.25      # ユーザ 1 人あたりの到着レート（全体では n·λ）
    alpha: 1.0        # 平均推論時間。ノードごとのリストも可
    horizon: 10000
    seed: 7

任意のセクション: arrival, service, network_delay, backend, nodes,
injections, sweep, live。検証エラーは ConfigurationError として
原因の項目名付きで送出する。
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import yaml

from .backends import BackendSpec
from .errors import ConfigurationError
from .metrics import DEFAULT_SLOPE_SAMPLES
from .protocol import ProtocolParams
from .sampling import ArrivalSpec, DelaySpec, ServiceSpec
from .simulator import DEFAULT_QUEUE_GUARD, DEFAULT_WARMUP_FRACTION, Injection, MoAConfig

MODES = ("simulate", "live")

TOP_LEVEL_KEYS = frozenset(
    {
        "mode",
        "n",
        "k",
        "M",
        "lambda",
        "alpha",
        "horizon",
        "warmup",
        "seed",
        "queue_guard",
        "slope_samples",
        "replications",
        "label",
        "arrival",
        "service",
        "network_delay",
        "backend",
        "nodes",
        "injections",
        "sweep",
        "live",
    }
)
BACKEND_KEYS = frozenset(f.name for f in fields(BackendSpec))

# 表の 7 構成 (M, k)
TABLE_GRID: Tuple[Tuple[int, int], ...] = ((0, 0), (1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (2, 3))


@dataclass(frozen=True)
class SweepPoint:
    M: int
    k: int
    lam: Optional[float] = None
    alpha: Optional[float] = None

    def label(self) -> str:
        return f"M={self.M},k={self.k}"


@dataclass(frozen=True)
class SweepGrid:
    points: Tuple[SweepPoint, ...]

    def __post_init__(self) -> None:
        if not self.points:
            raise ConfigurationError("grid", "sweep grid must contain at least one point")

    def __iter__(self):
        return iter(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class LiveOptions:
    """ライブ実行の設定。prompts は JSON Lines（1 行 1 件 {origin, text}）。"""

    prompts: Optional[str] = None
    pace_arrivals: bool = False
    health_check: bool = True


@dataclass(frozen=True)
class RunConfigFile:
    mode: str
    simulation: MoAConfig
    backends: Tuple[BackendSpec, ...]
    replications: int = 1
    sweep: Optional[SweepGrid] = None
    live: LiveOptions = field(default_factory=LiveOptions)

    @property
    def params(self) -> ProtocolParams:
        return self.simulation.params


# ----------------------------------------------------------------------
# 値の取り出しと検証
# ----------------------------------------------------------------------
def _require_mapping(value: Any, name: str) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigurationError(name, f"expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(mapping: Mapping[str, Any], allowed: frozenset, name: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        prefix = f"{name}." if name else ""
        raise ConfigurationError(f"{prefix}{unknown[0]}", "unknown key")


def _as_int(value: Any, name: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(name, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigurationError(name, f"must be >= {minimum}, got {value}")
    return value


def _as_float(value: Any, name: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(name, f"expected a number, got {value!r}")
    number = float(value)
    if not math.isfinite(number):
        raise ConfigurationError(name, f"must be finite, got {value!r}")
    if positive and not number > 0:
        raise ConfigurationError(name, f"must be > 0, got {value}")
    return number


def _as_bool(value: Any, name: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigurationError(name, f"expected true/false, got {value!r}")
    return value


def _alphas(value: Any, n: int) -> List[float]:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ConfigurationError("alpha", f"per-node list must have n={n} entries, got {len(value)}")
        return [_as_float(a, f"alpha[{i}]", positive=True) for i, a in enumerate(value)]
    return [_as_float(value, "alpha", positive=True)] * n


def _backend_spec(base: Mapping[str, Any], override: Mapping[str, Any], name: str) -> BackendSpec:
    merged: Dict[str, Any] = dict(base)
    merged.update(override)
    _check_keys(merged, BACKEND_KEYS, name)
    for key in ("timeout", "backoff_base", "delay_mean", "temperature"):
        if key in merged:
            merged[key] = _as_float(merged[key], f"{name}.{key}")
    for key in ("max_retries", "max_tokens"):
        if merged.get(key) is not None:
            merged[key] = _as_int(merged[key], f"{name}.{key}")
    if "realtime" in merged:
        merged["realtime"] = _as_bool(merged["realtime"], f"{name}.realtime")
    return BackendSpec(**merged)


def _parse_nodes(raw: Any, n: int) -> Dict[int, Mapping[str, Any]]:
    if raw is None:
        return {}
    if not isinstance(raw, list):
        raise ConfigurationError("nodes", "expected a list of node entries")
    nodes: Dict[int, Mapping[str, Any]] = {}
    for position, entry in enumerate(raw):
        entry = _require_mapping(entry, f"nodes[{position}]")
        _check_keys(entry, frozenset({"id", "alpha", "backend", "model", "temperature"}), f"nodes[{position}]")
        if "id" not in entry:
            raise ConfigurationError(f"nodes[{position}].id", "missing node id")
        node_id = _as_int(entry["id"], f"nodes[{position}].id", minimum=0)
        if node_id >= n:
            raise ConfigurationError(f"nodes[{position}].id", f"must be < n={n}, got {node_id}")
        if node_id in nodes:
            raise ConfigurationError("nodes", f"duplicate node id {node_id}")
        nodes[node_id] = entry
    return nodes


def _parse_point(entry: Any, position: int) -> SweepPoint:
    entry = _require_mapping(entry, f"sweep[{position}]")
    _check_keys(entry, frozenset({"M", "k", "lambda", "alpha"}), f"sweep[{position}]")
    if "M" not in entry or "k" not in entry:
        raise ConfigurationError(f"sweep[{position}]", "each point needs M and k")
    return SweepPoint(
        M=_as_int(entry["M"], f"sweep[{position}].M", minimum=0),
        k=_as_int(entry["k"], f"sweep[{position}].k", minimum=0),
        lam=_as_float(entry["lambda"], f"sweep[{position}].lambda", positive=True) if "lambda" in entry else None,
        alpha=_as_float(entry["alpha"], f"sweep[{position}].alpha", positive=True) if "alpha" in entry else None,
    )


def parse_grid(text: str) -> SweepGrid:
    """``--grid`` の値を解釈する。

    "table" は表の 7 構成、それ以外は ``M:k[:lambda[:alpha]]`` をカンマ区切りで並べる。
    """
    text = (text or "").strip()
    if text == "table":
        return SweepGrid(tuple(SweepPoint(M=m, k=k) for m, k in TABLE_GRID))
    points: List[SweepPoint] = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        parts = item.split(":")
        if not 2 <= len(parts) <= 4:
            raise ConfigurationError("grid", f"expected M:k[:lambda[:alpha]], got {item!r}")
        try:
            M, k = int(parts[0]), int(parts[1])
            lam = float(parts[2]) if len(parts) > 2 and parts[2] else None
            alpha = float(parts[3]) if len(parts) > 3 and parts[3] else None
        except ValueError as exc:
            raise ConfigurationError("grid", f"cannot parse {item!r}: {exc}") from exc
        if M < 0 or k < 0:
            raise ConfigurationError("grid", f"M and k must be >= 0 in {item!r}")
        if (lam is not None and not lam > 0) or (alpha is not None and not alpha > 0):
            raise ConfigurationError("grid", f"lambda and alpha must be > 0 in {item!r}")
        points.append(SweepPoint(M=M, k=k, lam=lam, alpha=alpha))
    return SweepGrid(tuple(points))


def point_config(base: MoAConfig, point: SweepPoint, seed: Optional[int] = None) -> MoAConfig:
    """基本設定にグリッド点 (M, k, λ, α) を重ねた MoAConfig を作る。"""
    params = ProtocolParams(n=base.params.n, k=point.k, M=point.M)
    arrival = base.arrival if point.lam is None else replace(base.arrival, rate=point.lam)
    services = base.services
    if point.alpha is not None:
        services = tuple(replace(spec, mean=point.alpha) for spec in services)
    return replace(
        base,
        params=params,
        arrival=arrival,
        services=services,
        seed=base.seed if seed is None else seed,
        label=point.label(),
    )


def config_from_mapping(data: Mapping[str, Any]) -> RunConfigFile:
    data = _require_mapping(data, "config")
    _check_keys(data, TOP_LEVEL_KEYS, "")
    for key in ("n", "k", "M", "lambda", "alpha"):
        if key not in data:
            raise ConfigurationError(key, "missing required key")

    mode = data.get("mode", "simulate")
    if mode not in MODES:
        raise ConfigurationError("mode", f"must be one of {MODES}, got {mode!r}")
    n = _as_int(data["n"], "n", minimum=2)
    k = _as_int(data["k"], "k", minimum=0)
    M = _as_int(data["M"], "M", minimum=0)
    if k > n - 1:
        raise ConfigurationError("k", f"must be <= n-1 = {n - 1}, got {k}")
    params = ProtocolParams(n=n, k=k, M=M)

    lam = _as_float(data["lambda"], "lambda", positive=True)
    arrival_raw = _require_mapping(data.get("arrival"), "arrival")
    _check_keys(arrival_raw, frozenset({"dist"}), "arrival")
    arrival = ArrivalSpec(rate=lam, dist=arrival_raw.get("dist", "poisson"))

    alphas = _alphas(data["alpha"], n)
    nodes = _parse_nodes(data.get("nodes"), n)
    for node_id, entry in nodes.items():
        if "alpha" in entry:
            alphas[node_id] = _as_float(entry["alpha"], f"nodes[{node_id}].alpha", positive=True)
    service_raw = _require_mapping(data.get("service"), "service")
    _check_keys(service_raw, frozenset({"dist", "cv"}), "service")
    service_dist = service_raw.get("dist", "exponential")
    cv = _as_float(service_raw.get("cv", 1.0), "service.cv", positive=True)
    services = tuple(ServiceSpec(mean=a, dist=service_dist, cv=cv) for a in alphas)

    delay_raw = _require_mapping(data.get("network_delay"), "network_delay")
    _check_keys(delay_raw, frozenset({"dist", "mean"}), "network_delay")
    delay = DelaySpec(
        dist=delay_raw.get("dist", "zero"),
        mean=_as_float(delay_raw.get("mean", 0.0), "network_delay.mean"),
    )

    horizon = _as_float(data.get("horizon", 10_000.0), "horizon", positive=True)
    warmup = data.get("warmup")
    warmup = horizon * DEFAULT_WARMUP_FRACTION if warmup is None else _as_float(warmup, "warmup")
    if warmup < 0:
        raise ConfigurationError("warmup", f"must be >= 0, got {warmup}")
    if warmup >= horizon:
        raise ConfigurationError("warmup", f"must be < horizon ({horizon}), got {warmup}")
    guard = data.get("queue_guard", DEFAULT_QUEUE_GUARD)
    guard = None if guard is None else _as_int(guard, "queue_guard", minimum=1)

    injections = []
    raw_injections = data.get("injections") or []
    if not isinstance(raw_injections, list):
        raise ConfigurationError("injections", "expected a list of {time, origin[, text]}")
    for position, entry in enumerate(raw_injections):
        entry = _require_mapping(entry, f"injections[{position}]")
        _check_keys(entry, frozenset({"time", "origin", "text"}), f"injections[{position}]")
        injections.append(
            Injection(
                time=_as_float(entry.get("time", 0.0), f"injections[{position}].time"),
                origin=_as_int(entry.get("origin", 0), f"injections[{position}].origin", minimum=0),
                text=str(entry.get("text", "")),
            )
        )

    label = data.get("label")
    simulation = MoAConfig(
        params=params,
        arrival=arrival,
        services=services,
        network_delay=delay,
        horizon=horizon,
        warmup=warmup,
        seed=_as_int(data.get("seed", 0), "seed", minimum=0),
        queue_guard=guard,
        injections=tuple(injections),
        slope_samples=_as_int(data.get("slope_samples", DEFAULT_SLOPE_SAMPLES), "slope_samples", minimum=2),
        label=None if label is None else str(label),
    )

    backend_raw = dict(_require_mapping(data.get("backend"), "backend"))
    # ライブ実行ではモックも応答遅延の分だけ実際に待つ
    if mode == "live":
        backend_raw.setdefault("realtime", True)
    backends = []
    for node_id in range(n):
        entry = nodes.get(node_id, {})
        override = dict(_require_mapping(entry.get("backend"), f"nodes[{node_id}].backend"))
        for key in ("model", "temperature"):
            if key in entry:
                override[key] = entry[key]
        backends.append(_backend_spec(backend_raw, override, "backend" if not override else f"nodes[{node_id}].backend"))

    sweep = None
    if data.get("sweep") is not None:
        raw_sweep = data["sweep"]
        if isinstance(raw_sweep, str):
            sweep = parse_grid(raw_sweep)
        elif isinstance(raw_sweep, list):
            sweep = SweepGrid(tuple(_parse_point(entry, i) for i, entry in enumerate(raw_sweep)))
        else:
            raise ConfigurationError("sweep", "expected a list of points or a grid string")
        validate_grid(sweep, simulation)

    live_raw = _require_mapping(data.get("live"), "live")
    _check_keys(live_raw, frozenset({"prompts", "pace_arrivals", "health_check"}), "live")
    live = LiveOptions(
        prompts=None if live_raw.get("prompts") is None else str(live_raw["prompts"]),
        pace_arrivals=_as_bool(live_raw.get("pace_arrivals", False), "live.pace_arrivals"),
        health_check=_as_bool(live_raw.get("health_check", True), "live.health_check"),
    )

    return RunConfigFile(
        mode=mode,
        simulation=simulation,
        backends=tuple(backends),
        replications=_as_int(data.get("replications", 1), "replications", minimum=1),
        sweep=sweep,
        live=live,
    )


def validate_grid(grid: SweepGrid, base: MoAConfig) -> None:
    for point in grid:
        try:
            point_config(base, point)
        except ConfigurationError as exc:
            raise ConfigurationError(f"grid[{point.label()}].{exc.field}", exc.message) from exc


def parse_config(path: Union[str, Path]) -> RunConfigFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigurationError("config", f"file not found: {path}") from exc
    except OSError as exc:
        raise ConfigurationError("config", f"cannot read {path}: {exc}") from exc
    return parse_config_text(text)


def parse_config_text(text: str) -> RunConfigFile:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigurationError("config", f"YAML syntax error{where}") from exc
    if data is None:
        raise ConfigurationError("config", "file is empty")
    return config_from_mapping(data)


# ----------------------------------------------------------------------
# 正規形への書き出し
# ----------------------------------------------------------------------
def _backend_mapping(spec: BackendSpec) -> Dict[str, Any]:
    return {f.name: getattr(spec, f.name) for f in fields(BackendSpec)}


def to_mapping(config: RunConfigFile) -> Dict[str, Any]:
    sim = config.simulation
    alphas = [spec.mean for spec in sim.services]
    data: Dict[str, Any] = {
        "mode": config.mode,
        "n": sim.params.n,
        "k": sim.params.k,
        "M": sim.params.M,
        "lambda": sim.arrival.rate,
        "alpha": alphas[0] if len(set(alphas)) == 1 else alphas,
        "horizon": sim.horizon,
        "warmup": sim.warmup,
        "seed": sim.seed,
        "queue_guard": sim.queue_guard,
        "slope_samples": sim.slope_samples,
        "replications": config.replications,
        "arrival": {"dist": sim.arrival.dist},
        "service": {"dist": sim.services[0].dist, "cv": sim.services[0].cv},
        "network_delay": {"dist": sim.network_delay.dist, "mean": sim.network_delay.mean},
        "backend": _backend_mapping(config.backends[0]),
    }
    if sim.label is not None:
        data["label"] = sim.label
    if any(spec != config.backends[0] for spec in config.backends[1:]):
        data["nodes"] = [
            {"id": node_id, "backend": _backend_mapping(spec)} for node_id, spec in enumerate(config.backends)
        ]
    if sim.injections:
        data["injections"] = [{"time": inj.time, "origin": inj.origin, "text": inj.text} for inj in sim.injections]
    if config.sweep is not None:
        data["sweep"] = []
        for point in config.sweep:
            entry: Dict[str, Any] = {"M": point.M, "k": point.k}
            if point.lam is not None:
                entry["lambda"] = point.lam
            if point.alpha is not None:
                entry["alpha"] = point.alpha
            data["sweep"].append(entry)
    data["live"] = {
        "prompts": config.live.prompts,
        "pace_arrivals": config.live.pace_arrivals,
        "health_check": config.live.health_check,
    }
    return data


def dump_config(config: RunConfigFile) -> str:
    return yaml.safe_dump(to_mapping(config), sort_keys=False, allow_unicode=True)


def load_prompts(path: Union[str, Path], n: int) -> List[Tuple[int, str]]:
    """ライブ実行用のプロンプトファイル（JSON Lines, {origin, text}）を読む。"""
    prompts: List[Tuple[int, str]] = []
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"prompts:{line_no}", f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict) or "text" not in record:
                raise ConfigurationError(f"prompts:{line_no}", "expected an object with origin and text")
            origin = _as_int(record.get("origin", 0), f"prompts:{line_no}.origin", minimum=0)
            if origin >= n:
                raise ConfigurationError(f"prompts:{line_no}.origin", f"must be < n={n}, got {origin}")
            text = str(record["text"])
            if not text:
                raise ConfigurationError(f"prompts:{line_no}.text", "prompt text must be non-empty")
            prompts.append((origin, text))
    return prompts
