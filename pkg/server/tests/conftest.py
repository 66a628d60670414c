import threading

import pytest

from rewardserve.models import FormulaModel
from rewardserve.server import create_server


@pytest.fixture(scope="module")
def formula_server():
    server = create_server("127.0.0.1", 0, FormulaModel())
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    yield f"http://{host}:{port}"
    server.shutdown()
    server.server_close()
    thread.join(timeout=5)
