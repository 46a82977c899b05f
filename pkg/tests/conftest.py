import pytest

from ccasim import Layout, System
from ccasim.manifest import Manifest

SMALL_LAYOUT = "granules 64\nroot 0-1\nrealm 2-3\nnormal 4-59\nsecure 60-63\n"


@pytest.fixture
def layout():
    return Layout.parse(SMALL_LAYOUT)


@pytest.fixture
def system(layout):
    return System(layout)


@pytest.fixture
def add_manifest():
    return Manifest(name="add", memory_pages=2, shared_pages=1, entry_script="add_responder")


@pytest.fixture
def otp_manifest():
    return Manifest(name="otp", memory_pages=4, shared_pages=2, devices=("VirtioNet",),
                    entry_script="otp_responder")
