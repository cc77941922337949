import json

import pytest
from fastapi.testclient import TestClient

from config import LAB_VERSION
from routes.reports import create_app


@pytest.fixture
def client(tmp_path):
    run = tmp_path / "lyapunov"
    run.mkdir()
    (run / "manifest.json").write_text(json.dumps({"subcommand": "lyapunov", "seed": 4, "schema_version": 1}))
    (run / "report.json").write_text(json.dumps({"summary": {"draws": 2}}))
    (tmp_path / "empty").mkdir()
    return TestClient(create_app(str(tmp_path)))


def test_health(client, tmp_path):
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["lab_version"] == LAB_VERSION
    assert body["runs_root"] == str(tmp_path)


def test_list_runs_skips_directories_without_manifest(client):
    runs = client.get("/runs").json()["runs"]
    assert runs == [{"name": "lyapunov", "subcommand": "lyapunov", "seed": 4, "schema_version": 1, "has_report": True}]


def test_manifest_and_report(client):
    assert client.get("/runs/lyapunov/manifest").json()["seed"] == 4
    assert client.get("/runs/lyapunov/report").json()["summary"]["draws"] == 2


def test_missing_run_and_file(client):
    assert client.get("/runs/absent/report").status_code == 404
    assert client.get("/runs/empty/manifest").status_code == 404
    assert client.get("/runs/..%2F..%2Fetc/report").status_code == 404
