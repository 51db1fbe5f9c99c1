import pytest

from helpers import TileTestServer


@pytest.fixture
def tile_server():
    server = TileTestServer()
    yield server
    server.close()
