"""Reference execution worker.

Line-delimited JSON on stdin/stdout:
  requests  {"op": "exec", "id": n, "code": s, "timeout_ms": t} | {"op": "interrupt"}
  events    {"id": n, "event": "stream" | "display" | "error" | "done", ...}
One namespace persists across requests. Lines starting with "!" run as shell
commands. An interrupt request raises KeyboardInterrupt in the running cell.
"""

import ast
import base64
import io
import json
import os
import queue
import signal
import subprocess
import sys
import threading
import time
import traceback

os.environ.setdefault("MPLBACKEND", "Agg")

_out = sys.__stdout__
_out_lock = threading.Lock()
_state_lock = threading.Lock()
_busy = False
_requests = queue.Queue()
_namespace = {"__name__": "__main__"}
_execution_count = 0


def send(obj):
    line = json.dumps(obj) + "\n"
    with _out_lock:
        _out.write(line)
        _out.flush()


class CellTimeout(BaseException):
    pass


class Capture(io.TextIOBase):
    def __init__(self, rid, name):
        self.rid = rid
        self.name = name

    def writable(self):
        return True

    def write(self, text):
        if text:
            send({"id": self.rid, "event": "stream", "name": self.name, "text": text})
        return len(text)


def _shell(command):
    proc = subprocess.run(command, shell=True, stdout=subprocess.PIPE,
                          stderr=subprocess.STDOUT, text=True)
    if proc.stdout:
        sys.stdout.write(proc.stdout)


def _bundle(obj):
    data = {"text/plain": repr(obj)}
    for method, mime in (("_repr_html_", "text/html"), ("_repr_png_", "image/png")):
        fn = getattr(obj, method, None)
        if callable(fn):
            try:
                value = fn()
            except Exception:
                value = None
            if value is None:
                continue
            if isinstance(value, bytes):
                value = base64.b64encode(value).decode("ascii")
            data[mime] = value
    return data


def _make_display(rid_box):
    def display(*objs):
        for obj in objs:
            send({"id": rid_box[0], "event": "display", "data": _bundle(obj)})
    return display


_current = [0]
_namespace["display"] = _make_display(_current)
_namespace["_capy_shell"] = _shell


def _rewrite_shell(code):
    lines = []
    for line in code.split("\n"):
        stripped = line.lstrip()
        if stripped.startswith("!"):
            indent = line[: len(line) - len(stripped)]
            line = "%s_capy_shell(%r)" % (indent, stripped[1:])
        lines.append(line)
    return "\n".join(lines)


def _flush_figures(rid):
    plt = sys.modules.get("matplotlib.pyplot")
    if plt is None:
        return
    for num in plt.get_fignums():
        fig = plt.figure(num)
        buf = io.BytesIO()
        fig.savefig(buf, format="png", bbox_inches="tight")
        send({"id": rid, "event": "display", "data": {
            "image/png": base64.b64encode(buf.getvalue()).decode("ascii"),
            "text/plain": repr(fig),
        }})
    plt.close("all")


def _on_alarm(signum, frame):
    raise CellTimeout()


def run_cell(rid, code, timeout_ms):
    global _execution_count
    tree = ast.parse(_rewrite_shell(code), "<cell>", "exec")
    last = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        last = ast.Expression(tree.body.pop().value)
    _execution_count += 1
    if timeout_ms:
        signal.setitimer(signal.ITIMER_REAL, timeout_ms / 1000.0)
    try:
        exec(compile(tree, "<cell>", "exec"), _namespace)
        if last is not None:
            value = eval(compile(last, "<cell>", "eval"), _namespace)
            if value is not None:
                _namespace["_"] = value
                send({"id": rid, "event": "display", "execute_result": True,
                      "execution_count": _execution_count, "data": _bundle(value)})
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
    _flush_figures(rid)


def handle(req):
    global _busy
    rid = req.get("id", 0)
    _current[0] = rid
    start = time.monotonic()
    status = "ok"
    saved = sys.stdout, sys.stderr
    sys.stdout, sys.stderr = Capture(rid, "stdout"), Capture(rid, "stderr")
    try:
        with _state_lock:
            _busy = True
        run_cell(rid, req.get("code", ""), req.get("timeout_ms"))
    except KeyboardInterrupt:
        status = "interrupted"
    except CellTimeout:
        status = "timeout"
    except BaseException as exc:
        status = "error"
        send({"id": rid, "event": "error", "ename": type(exc).__name__,
              "evalue": str(exc),
              "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__)})
    finally:
        with _state_lock:
            _busy = False
        sys.stdout, sys.stderr = saved
    duration = int((time.monotonic() - start) * 1000)
    while True:
        try:
            send({"id": rid, "event": "done", "status": status, "duration_ms": duration})
            return
        except KeyboardInterrupt:
            continue


def reader():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except ValueError:
            continue
        if req.get("op") == "interrupt":
            with _state_lock:
                if _busy:
                    os.kill(os.getpid(), signal.SIGINT)
        elif req.get("op") == "exec":
            _requests.put(req)
    _requests.put(None)


def main():
    signal.signal(signal.SIGALRM, _on_alarm)
    threading.Thread(target=reader, daemon=True).start()
    while True:
        try:
            req = _requests.get()
        except KeyboardInterrupt:
            continue
        if req is None:
            return 0
        try:
            handle(req)
        except KeyboardInterrupt:
            continue
        except Exception as exc:
            send({"id": req.get("id", 0), "event": "error", "ename": type(exc).__name__,
                  "evalue": "worker crashed: %s" % exc, "traceback": []})
            return 1


if __name__ == "__main__":
    sys.exit(main())
