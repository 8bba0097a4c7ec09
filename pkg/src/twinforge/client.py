"""Thin HTTP client for the instance API.

Every call returns the decoded JSON document and keeps the raw response body
in ``last_raw`` so callers that promise byte-faithful output (the CLI's json
mode) can print exactly what the server sent. Error responses are rehydrated
into the same error types the server raised.
"""

from __future__ import annotations

import base64
from typing import Iterator, Optional

import requests

from .errors import TwinError, Unreachable, error_from_code

DEFAULT_TIMEOUT_S = 30.0


class TwinClient:
    def __init__(self, endpoint: str, token: Optional[str] = None,
                 timeout: float = DEFAULT_TIMEOUT_S):
        self.endpoint = endpoint.rstrip("/")
        self.token = token
        self.timeout = timeout
        self.last_raw: bytes = b""

    # -- plumbing -----------------------------------------------------------------

    def _headers(self) -> dict:
        if self.token:
            return {"Authorization": f"Bearer {self.token}"}
        return {}

    def _request(self, method: str, path: str, params: Optional[dict] = None,
                 body: Optional[dict] = None) -> dict:
        url = f"{self.endpoint}/api/v1{path}"
        try:
            response = requests.request(
                method, url, params=params, json=body,
                headers=self._headers(), timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise Unreachable(f"{url}: {exc}")
        self.last_raw = response.content
        doc = self._decode(response)
        if response.status_code >= 400:
            detail = doc.get("error") or {}
            raise error_from_code(
                detail.get("code", "error"),
                detail.get("message", f"HTTP {response.status_code}"),
                **detail.get("detail", {}),
            )
        return doc

    @staticmethod
    def _decode(response) -> dict:
        try:
            doc = response.json()
        except ValueError:
            raise TwinError(f"non-JSON response (HTTP {response.status_code})")
        return doc if isinstance(doc, dict) else {"value": doc}

    # -- assets -------------------------------------------------------------------

    def publish_asset(self, name: str, kind: str, payload: bytes,
                      visibility: str = "private",
                      manifest: Optional[dict] = None) -> dict:
        return self._request("POST", "/assets", body={
            "name": name,
            "kind": kind,
            "visibility": visibility,
            "manifest": manifest or {},
            "payload_b64": base64.b64encode(payload).decode("ascii"),
        })

    def list_assets(self, kind: Optional[str] = None, name: Optional[str] = None,
                    remote: bool = False) -> dict:
        params = {}
        if kind:
            params["kind"] = kind
        if name:
            params["name"] = name
        if remote:
            params["remote"] = "1"
        return self._request("GET", "/assets", params=params)

    def get_asset(self, asset_id: str, version: Optional[int] = None) -> dict:
        params = {"version": version} if version else None
        return self._request("GET", f"/assets/{asset_id}", params=params)

    def update_asset(self, asset_id: str, payload: bytes, manifest: dict) -> dict:
        return self._request("PUT", f"/assets/{asset_id}", body={
            "manifest": manifest,
            "payload_b64": base64.b64encode(payload).decode("ascii"),
        })

    # -- twins ---------------------------------------------------------------------

    def compose_dt(self, name: str, refs: list, config: dict,
                   lifecycle: Optional[dict] = None) -> dict:
        body = {"name": name, "refs": refs, "config": config}
        if lifecycle:
            body["lifecycle"] = lifecycle
        return self._request("POST", "/dts", body=body)

    def list_dts(self) -> dict:
        return self._request("GET", "/dts")

    def show_dt(self, dt_id: str) -> dict:
        return self._request("GET", f"/dts/{dt_id}")

    def reconfigure_dt(self, dt_id: str, config: dict,
                       refs: Optional[list] = None) -> dict:
        body = {"config": config}
        if refs is not None:
            body["refs"] = refs
        return self._request("PATCH", f"/dts/{dt_id}/config", body=body)

    def transition_dt(self, dt_id: str, target: str) -> dict:
        return self._request("POST", f"/dts/{dt_id}/transition", body={"target": target})

    def set_peers(self, dt_id: str, peers: list) -> dict:
        return self._request("POST", f"/federation/dts/{dt_id}/peers", body={"peers": peers})

    def validate_config(self, config, refs: Optional[list] = None) -> dict:
        body = {"config": config}
        if refs:
            body["refs"] = refs
        return self._request("POST", "/config/validate", body=body)

    # -- jobs -----------------------------------------------------------------------

    def submit_job(self, dt_id: str, mode: Optional[str] = None,
                   time_limit_s: Optional[float] = None,
                   restart: Optional[dict] = None,
                   trigger: str = "api") -> dict:
        body: dict = {"dt_id": dt_id, "trigger": trigger}
        if mode:
            body["mode"] = mode
        if time_limit_s is not None:
            body["time_limit_s"] = time_limit_s
        if restart is not None:
            body["restart"] = restart
        return self._request("POST", "/jobs", body=body)

    def job(self, job_id: str) -> dict:
        return self._request("GET", f"/jobs/{job_id}")

    def jobs(self, dt_id: Optional[str] = None) -> dict:
        params = {"dt_id": dt_id} if dt_id else None
        return self._request("GET", "/jobs", params=params)

    def job_logs(self, job_id: str, follow: bool = False) -> Iterator[str]:
        url = f"{self.endpoint}/api/v1/jobs/{job_id}/logs"
        params = {"follow": "1"} if follow else {}
        try:
            response = requests.get(
                url, params=params, headers=self._headers(), stream=True,
                timeout=None if follow else self.timeout,
            )
        except requests.RequestException as exc:
            raise Unreachable(f"{url}: {exc}")
        if response.status_code >= 400:
            self.last_raw = response.content
            doc = self._decode(response)
            detail = doc.get("error") or {}
            raise error_from_code(detail.get("code", "error"), detail.get("message", ""))
        for line in response.iter_lines(decode_unicode=True):
            if line is not None:
                yield line

    def terminate_job(self, job_id: str, grace_s: Optional[float] = None) -> dict:
        params = {"grace_s": grace_s} if grace_s is not None else None
        return self._request("DELETE", f"/jobs/{job_id}", params=params)

    # -- federation -------------------------------------------------------------------

    def link_backend(self, endpoint: str, token: Optional[str] = None,
                     sync_interval_s: float = 0) -> dict:
        body: dict = {"endpoint": endpoint, "sync_interval_s": sync_interval_s}
        if token:
            body["token"] = token
        return self._request("POST", "/federation/links", body=body)

    def links(self) -> dict:
        return self._request("GET", "/federation/links")

    def sync_backend(self, backend_id: str) -> dict:
        return self._request("POST", f"/federation/sync/{backend_id}")

    def pull_asset(self, backend: str, asset_id: str,
                   version: Optional[int] = None) -> dict:
        body: dict = {"backend": backend, "asset_id": asset_id}
        if version:
            body["version"] = version
        return self._request("POST", "/federation/pull", body=body)

    def push_changes(self, backend: str, owner: Optional[str] = None) -> dict:
        body: dict = {"backend": backend}
        if owner:
            body["owner"] = owner
        return self._request("POST", "/federation/push", body=body)

    # -- users, trials, metrics ----------------------------------------------------------

    def create_user(self, name: str) -> dict:
        return self._request("POST", "/users", body={"name": name})

    def trial_run(self, config: dict) -> dict:
        return self._request("POST", "/trial", body={"config": config})

    def post_metric(self, dt_id: str, name: str, value: float,
                    ts: Optional[float] = None, labels: Optional[dict] = None) -> dict:
        body: dict = {"name": name, "value": value}
        if ts is not None:
            body["ts"] = ts
        if labels:
            body["labels"] = labels
        return self._request("POST", f"/metrics/{dt_id}", body=body)

    def get_metrics(self, dt_id: str, name: Optional[str] = None,
                    since: Optional[float] = None, limit: Optional[int] = None) -> dict:
        params: dict = {}
        if name:
            params["name"] = name
        if since is not None:
            params["since"] = since
        if limit is not None:
            params["limit"] = limit
        return self._request("GET", f"/metrics/{dt_id}", params=params or None)

    def health(self) -> dict:
        return self._request("GET", "/health")
