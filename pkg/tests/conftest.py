import logging

import pytest

# PBFT and mechanism modules log expected rejections at WARNING during
# fault tests; keep them out of the failure noise unless a test opts in.
logging.getLogger("shardemu").setLevel(logging.ERROR)


@pytest.fixture
def two_shard_pmap():
    from shardemu.core import PartitionMap

    return PartitionMap(n_shards=2)
