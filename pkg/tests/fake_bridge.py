"""Scriptable stand-in for an external advisor process.

Reads newline-delimited JSON requests on stdin and answers per the mode in
argv[1]: "echo" answers MAINTAIN immediately, "first-slow" stalls only the
first response past any sane deadline, "error" returns error objects, and
"garbage" emits one unparseable line before behaving. Used to exercise the
primary side's deadline and resync handling.
"""

import json
import sys
import time


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "echo"
    seen = 0
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        if req.get("kind") == "shutdown":
            print(json.dumps({"id": req["id"], "action": "MAINTAIN",
                              "confidence": 0.0, "rationale": "bye"}), flush=True)
            return 0
        if req.get("kind") == "feedback":
            print(json.dumps({"id": req["id"], "action": "MAINTAIN",
                              "confidence": 0.0, "rationale": "ack"}), flush=True)
            continue
        seen += 1
        if mode == "first-slow" and seen == 1:
            time.sleep(0.3)
        if mode == "error":
            print(json.dumps({"id": req["id"], "error": "no model loaded"}),
                  flush=True)
            continue
        if mode == "garbage" and seen == 1:
            print("this is not json", flush=True)
            continue
        print(json.dumps({"id": req["id"], "action": "MAINTAIN",
                          "confidence": 0.9, "rationale": "stub"}), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
