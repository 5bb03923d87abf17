import hashlib

import pytest

from badsim.chain import TxHash
from badsim.threat import BACKENDS


@pytest.fixture(params=["python", "compiled"])
def backend(request):
    if request.param not in BACKENDS:
        pytest.skip("compiled kernel not built")
    return request.param


def H(label) -> TxHash:
    """Readable stand-in hash for a symbol."""
    return TxHash(hashlib.sha256(str(label).encode()).digest())
