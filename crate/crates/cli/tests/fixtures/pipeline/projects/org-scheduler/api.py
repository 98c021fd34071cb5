import json
import urllib.request


class ApiError(Exception):
    pass


def fetch_status(url, timeout=5):
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            body = resp.read().decode("utf-8")
    except OSError as exc:
        raise ApiError(str(exc))
    try:
        return json.loads(body)
    except ValueError:
        raise ApiError("invalid JSON")


def summarize(statuses):
    ok = [s for s in statuses if s.get("state") == "ok"]
    return f"{len(ok)}/{len(statuses)} healthy"
