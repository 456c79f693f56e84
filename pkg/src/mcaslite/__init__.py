"""mcaslite: a sharded, network-attached key-value store with
persistent-memory-style storage engines and near-data compute plugins."""

__version__ = "0.1.0"
