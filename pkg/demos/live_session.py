"""Drive the WebSocket guidance service the way the browser UI does.

Starts the service in-process on the bundled scenario, then plays operator:
load the map, lock the model, select the peg hole, mount the drill, park the
tool 4 mm off axis, watch the feedback go red, nudge it back on axis, and
mark the hole done once the panel is green.  Every command ack and the
feedback section of each state push are printed as they arrive.

Run as `python3 demos/live_session.py` from the repository root.
"""

import json
import time

from websockets.sync.client import connect

from beamguide.fixtures import closure_model, closure_scenario
from beamguide.service import ServiceThread


class Operator:
    """Send a command, drain pushes until its ack comes back."""

    def __init__(self, url):
        self.ws = connect(url)
        self.seq = 0

    def command(self, kind, payload=None):
        self.seq += 1
        msg = {"seq": self.seq, "kind": kind}
        if payload is not None:
            msg["payload"] = payload
        started = time.perf_counter()
        self.ws.send(json.dumps(msg))
        while True:
            data = json.loads(self.ws.recv(timeout=5.0))
            if data.get("type") == "ack":
                ms = 1000.0 * (time.perf_counter() - started)
                flag = "ok " if data["ok"] else "ERR"
                print(f"  [{flag}] {kind:15s} {ms:5.1f} ms  {data.get('detail', '')}")
                return data

    def next_push(self):
        while True:
            data = json.loads(self.ws.recv(timeout=5.0))
            if data.get("type") == "push":
                return data


def show(push):
    fb = push.get("feedback")
    if fb is None:
        print(f"  push #{push['seq']}: phase={push['phase']} (no feedback)")
        return
    metrics = {
        k: round(v, 3)
        for k, v in fb["metrics"].items()
        if isinstance(v, (int, float)) and not isinstance(v, bool)
    }
    state = "GREEN" if fb["metrics"].get("all_green") else "red"
    print(f"  push #{push['seq']}: {fb['component_id']} {state} {metrics}")


def main() -> None:
    with ServiceThread(closure_scenario(), closure_model()) as server:
        print(f"service at {server.url}")
        op = Operator(server.url)
        op.command("LoadMap")
        op.command("LoadModel")
        op.command("Lock")
        op.command("SelectComponent", {"component_id": "peg1"})
        op.command("MountTool", {"tool_id": "auger-16"})
        # Park the drill 4 mm off the hole axis, pointing straight down.
        op.command("SetInitialPose", {"params": [0.004, 0.0, 0.08, 180.0, 0.0, 0.0]})
        show(op.next_push())
        op.command("NudgeTool", {"dt": [-0.004, 0.0, 0.0]})
        for _ in range(2):
            show(op.next_push())
        op.command("MarkDone", {"component_id": "peg1"})
        push = op.next_push()
        show(push)
        print(f"  component states: {push['components']}")
        op.ws.close()


if __name__ == "__main__":
    main()
