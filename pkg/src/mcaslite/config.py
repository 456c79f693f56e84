"""Server configuration: JSON with a "shards" array plus global keys.

Example::

    {
      "shards": [
        { "core": 0, "port": 11911, "net": "mlx5_0",
          "default_backend": "hstore",
          "dax_config": [{ "path": "/tmp/shard0.pmem",
                           "addr": "0x9000000000", "size": "128M" }],
          "ado_plugins": ["mcaslite.plugins.passthru"],
          "ado_cores": "2",
          "ado_params": { "param1": "..." },
          "ado_signals": ["post-put", "post-erase"] }
      ],
      "ado_path": "/opt/plugins",
      "net_providers": "tcp"
    }

Unknown keys warn; missing required keys raise ConfigError naming the
field.  dax sizes take an optional K/M/G suffix and default to 128 MiB.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .errors import ConfigError

log = logging.getLogger("mcaslite.config")

DEFAULT_DAX_SIZE = 128 * 1024 * 1024
BACKENDS = ("hstore", "hstore-cc", "mapstore")
SIGNALS = ("post-put", "post-erase")

_SHARD_KEYS = {"core", "port", "net", "default_backend", "dax_config",
               "ado_plugins", "ado_cores", "ado_params", "ado_signals",
               "base_size", "ado_heap_size"}
_TOP_KEYS = {"shards", "ado_path", "net_providers", "cluster", "ado_mode",
             "addr"}
_DAX_KEYS = {"path", "addr", "size"}
_CLUSTER_KEYS = {"name", "group", "addr", "port"}


def parse_size(value) -> int:
    if isinstance(value, int):
        return value
    text = str(value).strip().upper()
    factor = 1
    for suffix, mult in (("K", 1 << 10), ("M", 1 << 20), ("G", 1 << 30)):
        if text.endswith(suffix):
            factor = mult
            text = text[:-1]
            break
    try:
        return int(text, 0) * factor
    except ValueError:
        raise ConfigError("size", f"cannot parse size {value!r}") from None


@dataclass
class DaxConfig:
    path: str
    addr: int = 0
    size: int = DEFAULT_DAX_SIZE


@dataclass
class ClusterConfig:
    name: str
    group: str
    addr: str = ""
    port: int = 0


@dataclass
class ShardConfig:
    port: int
    core: int = -1
    net: str = ""
    default_backend: str = "hstore"
    dax_config: list[DaxConfig] = field(default_factory=list)
    ado_plugins: list[str] = field(default_factory=list)
    ado_cores: int = 1
    ado_params: dict[str, str] = field(default_factory=dict)
    ado_signals: list[str] = field(default_factory=list)
    base_size: int = 1024
    ado_heap_size: int = 8 * 1024 * 1024


@dataclass
class Config:
    shards: list[ShardConfig]
    ado_path: str = ""
    net_providers: str = "tcp"
    ado_mode: str = "process"
    addr: str = "127.0.0.1"
    cluster: ClusterConfig | None = None


def _warn_unknown(obj: dict, known: set, where: str) -> None:
    for key in obj:
        if key not in known:
            log.warning("ignoring unknown config key %r in %s", key, where)


def load_config(text: str) -> Config:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("json", str(exc)) from None
    if not isinstance(raw, dict):
        raise ConfigError("json", "top level must be an object")
    _warn_unknown(raw, _TOP_KEYS, "top level")
    if "shards" not in raw or not isinstance(raw["shards"], list) \
            or not raw["shards"]:
        raise ConfigError("shards", "at least one shard required")

    shards = []
    for i, sh in enumerate(raw["shards"]):
        where = f"shards[{i}]"
        _warn_unknown(sh, _SHARD_KEYS, where)
        if "port" not in sh:
            raise ConfigError("port", f"{where} missing port")
        backend = sh.get("default_backend", "hstore")
        if backend not in BACKENDS:
            raise ConfigError("default_backend",
                              f"{where}: unknown backend {backend!r}")
        dax = []
        for j, entry in enumerate(sh.get("dax_config", [])):
            _warn_unknown(entry, _DAX_KEYS, f"{where}.dax_config[{j}]")
            if "path" not in entry:
                raise ConfigError("dax_config", f"{where}: entry missing path")
            addr = entry.get("addr", "0")
            dax.append(DaxConfig(entry["path"], int(str(addr), 0),
                                 parse_size(entry.get("size",
                                                      DEFAULT_DAX_SIZE))))
        if backend != "mapstore" and not dax:
            raise ConfigError("dax_config",
                              f"{where}: {backend} requires dax_config")
        signals = sh.get("ado_signals", [])
        for sig in signals:
            if sig not in SIGNALS:
                raise ConfigError("ado_signals", f"{where}: unknown {sig!r}")
        shards.append(ShardConfig(
            port=int(sh["port"]),
            core=int(sh.get("core", -1)),
            net=sh.get("net", ""),
            default_backend=backend,
            dax_config=dax,
            ado_plugins=list(sh.get("ado_plugins", [])),
            ado_cores=int(sh.get("ado_cores", 1)),
            ado_params=dict(sh.get("ado_params", {})),
            ado_signals=list(signals),
            base_size=int(sh.get("base_size", 1024)),
            ado_heap_size=parse_size(sh.get("ado_heap_size",
                                            8 * 1024 * 1024)),
        ))

    ports = [s.port for s in shards]
    if len(set(ports)) != len(ports):
        raise ConfigError("port-conflict", "shard ports must be unique")
    paths = [d.path for s in shards for d in s.dax_config]
    if len(set(paths)) != len(paths):
        raise ConfigError("dax_config", "each dax path owned by one shard")

    cluster = None
    if "cluster" in raw:
        cl = raw["cluster"]
        _warn_unknown(cl, _CLUSTER_KEYS, "cluster")
        cluster = ClusterConfig(cl.get("name", ""), cl.get("group", ""),
                                cl.get("addr", ""), int(cl.get("port", 0)))

    mode = raw.get("ado_mode", "process")
    if mode not in ("process", "inproc"):
        raise ConfigError("ado_mode", f"unknown mode {mode!r}")
    return Config(shards=shards, ado_path=raw.get("ado_path", ""),
                  net_providers=raw.get("net_providers", "tcp"),
                  ado_mode=mode, addr=raw.get("addr", "127.0.0.1"),
                  cluster=cluster)
