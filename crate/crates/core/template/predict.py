#!/usr/bin/env python3
"""Reference predict loop for protocol v1.

The platform starts this script, waits for the ready line, then sends one
JSON object per line on stdin: {"id": "...", "input": <value>}. Each request
must be answered, in order, with one line {"id": "...", "output": <value>}.
The record with id "__health__" is a liveness probe and must be answered
like any other. Exit 0 when stdin closes.
"""
import json
import sys


def load_model():
    # Replace with real model loading, e.g. from files listed in
    # manifest.json "model_files".
    return lambda x: x


def main():
    model = load_model()
    sys.stdout.write('{"ready":true,"protocol":1}\n')
    sys.stdout.flush()
    for line in sys.stdin:
        if not line.strip():
            continue
        record = json.loads(line)
        output = None if record["id"] == "__health__" else model(record["input"])
        sys.stdout.write(json.dumps({"id": record["id"], "output": output}, separators=(",", ":")) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
