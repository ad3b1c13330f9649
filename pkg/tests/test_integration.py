"""
HTTP 服務集成測試
"""

import pytest
from fastapi.testclient import TestClient

from app.core.config import settings
from app.main import app
from app.services.uncertain_model import plant_to_model
from tests.conftest import make_scalar_plant, make_static_plant


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def _scalar_payload(**query):
    model = plant_to_model(make_scalar_plant(gain=1.0)).model_dump()
    base = {"n_starts": 1, "workers": 1, "swarm": {"swarm_size": 10, "workers": 1}}
    base.update(query)
    return {"model": model, "query": base}


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "healthy"
    assert body["version"] == settings.VERSION


def test_mc_sample_size(client):
    response = client.post("/api/v1/mc-sample-size", json={"gamma": 0.01, "epsilon": 0.01})
    assert response.status_code == 200
    assert response.json()["samples"] == 459

    assert client.post("/api/v1/mc-sample-size", json={"gamma": 1.5, "epsilon": 0.01}).status_code == 422


def test_get_benchmark(client):
    response = client.get("/api/v1/benchmarks/default")
    assert response.status_code == 200
    model = response.json()["model"]
    assert len(model["blocks"]) == 6
    assert model["n_controls"] == 1 and model["n_measurements"] == 2

    assert client.get("/api/v1/benchmarks/missing").status_code == 400


def test_worst_case_inline_model(client):
    response = client.post("/api/v1/worst-case", json=_scalar_payload(kind="stability"))
    assert response.status_code == 200
    body = response.json()
    assert body["success"]
    assert body["report"]["worst_value"] == pytest.approx(0.0, abs=1e-8)
    assert body["report"]["worst_point"] == [pytest.approx(1.0, abs=1e-8)]


def test_worst_case_invalid_requests(client):
    payload = _scalar_payload()
    payload["benchmark"] = "default"
    assert client.post("/api/v1/worst-case", json=payload).status_code == 400

    assert client.post("/api/v1/worst-case", json=_scalar_payload(kind="bogus")).status_code == 400

    static = {"model": plant_to_model(make_static_plant()).model_dump(), "query": {"kind": "h2", "n_starts": 1}}
    assert client.post("/api/v1/worst-case", json=static).status_code == 400

    no_baseline = _scalar_payload()
    no_baseline["use_baseline"] = True
    assert client.post("/api/v1/worst-case", json=no_baseline).status_code == 400


def test_monte_carlo_inline_model(client):
    payload = {"model": plant_to_model(make_scalar_plant(gain=1.0)).model_dump(), "samples": 100, "seed": 2}
    response = client.post("/api/v1/monte-carlo", json=payload)
    assert response.status_code == 200
    report = response.json()["report"]
    assert report["evaluations"] == 100
    assert report["discarded"] == 0
