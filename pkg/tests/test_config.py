import logging

import pytest

from mcaslite.config import load_config, parse_size
from mcaslite.errors import ConfigError

TWO_SHARDS = """
{
  "shards" :
  [
    {
      "core" : 0,
      "port" : 11911,
      "net"  : "mlx5_0",
      "default_backend" : "hstore",
      "dax_config" : [{
          "path": "/tmp/dax0.0",
          "addr": "0x9000000000" }]
    },
    {
      "core" : 1,
      "port" : 11912,
      "net"  : "mlx5_0",
      "default_backend" : "hstore",
      "dax_config" : [{
          "path": "/tmp/dax0.1",
          "addr": "0xA000000000" }]
    }
  ],
  "net_providers" : "verbs"
}
"""


def test_two_shard_example():
    cfg = load_config(TWO_SHARDS)
    assert len(cfg.shards) == 2
    assert [s.port for s in cfg.shards] == [11911, 11912]
    assert all(s.default_backend == "hstore" for s in cfg.shards)
    assert cfg.shards[0].dax_config[0].path == "/tmp/dax0.0"
    assert cfg.shards[0].dax_config[0].addr == 0x9000000000
    assert cfg.net_providers == "verbs"


def test_missing_port():
    with pytest.raises(ConfigError) as exc:
        load_config('{"shards": [{"default_backend": "mapstore"}]}')
    assert exc.value.field == "port"


def test_duplicate_ports():
    text = """{"shards": [
        {"port": 1, "default_backend": "mapstore"},
        {"port": 1, "default_backend": "mapstore"}]}"""
    with pytest.raises(ConfigError) as exc:
        load_config(text)
    assert exc.value.field == "port-conflict"


def test_duplicate_dax_paths():
    text = """{"shards": [
        {"port": 1, "dax_config": [{"path": "/x"}]},
        {"port": 2, "dax_config": [{"path": "/x"}]}]}"""
    with pytest.raises(ConfigError):
        load_config(text)


def test_backend_requires_dax():
    with pytest.raises(ConfigError) as exc:
        load_config('{"shards": [{"port": 1, "default_backend": "hstore"}]}')
    assert exc.value.field == "dax_config"


def test_unknown_keys_warn_not_error(caplog):
    text = """{"shards": [{"port": 5, "default_backend": "mapstore",
                "mystery": 1}], "bogus_top": true}"""
    with caplog.at_level(logging.WARNING, logger="mcaslite.config"):
        cfg = load_config(text)
    assert cfg.shards[0].port == 5
    assert sum("ignoring unknown config key" in r.message
               for r in caplog.records) == 2


def test_signals_validated():
    text = """{"shards": [{"port": 5, "default_backend": "mapstore",
                "ado_signals": ["post-load"]}]}"""
    with pytest.raises(ConfigError):
        load_config(text)


def test_cluster_section_and_sizes():
    text = """{"shards": [{"port": 5, "default_backend": "mapstore"}],
               "cluster": {"name": "server-0", "group": "g0",
                           "addr": "10.0.0.1", "port": 11999}}"""
    cfg = load_config(text)
    assert cfg.cluster.name == "server-0"
    assert parse_size("128M") == 128 << 20
    assert parse_size("2G") == 2 << 30
    assert parse_size(4096) == 4096
    with pytest.raises(ConfigError):
        parse_size("12Q")


def test_bad_json_is_config_error():
    with pytest.raises(ConfigError):
        load_config("{not json")
    with pytest.raises(ConfigError):
        load_config("[]")
    with pytest.raises(ConfigError):
        load_config('{"shards": []}')
