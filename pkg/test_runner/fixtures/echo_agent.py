#!/usr/bin/env python3
"""
Minimal stdio agent for bridge tests. Reads one JSON message per line from stdin and
replies with turn messages on stdout. It does not import docnav.

    echo_agent.py [--answer TEXT] [--fetch-first] [--sleep SECONDS] [--log FILE]

--fetch-first asks for page 1 on the first turn and answers on the next one.
--sleep delays every reply, to exercise turn timeouts.
--log appends every received message, with image payloads replaced by their length.
"""
import argparse
import json
import sys
import time


def turn_text(t: int, action: str) -> str:
    if t == 0:
        think = (
            "<think><analysis>Echo agent.</analysis><plan>Answer directly.</plan>"
            "<summary>Replied.</summary></think>"
        )
    else:
        think = (
            "<think><analysis>Echo agent.</analysis><relevant_pages>[]</relevant_pages>"
            "<summary>Replied.</summary></think>"
        )
    return f"{think}<action>{action}</action>"


def scrub(msg: dict) -> dict:
    """Replace base64 payloads by their length so logs stay small."""
    for key in ("images", "pages"):
        for item in msg.get(key, []):
            if "b64" in item:
                item["b64"] = len(item["b64"])
    return msg


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--answer", default="echo")
    parser.add_argument("--fetch-first", dest="fetch_first", action="store_true")
    parser.add_argument("--sleep", type=float, default=0.0)
    parser.add_argument("--log")
    args = parser.parse_args()

    for line in sys.stdin:
        msg = json.loads(line)
        if args.log:
            with open(args.log, "a") as f:
                f.write(json.dumps(scrub(msg)) + "\n")
        if msg["type"] == "done":
            continue
        t = 0 if msg["type"] == "reset" else int(msg["turn"])
        if args.fetch_first and t == 0:
            action = "<fetch_page>[1]</fetch_page>"
        else:
            action = f"<answer>{args.answer}</answer>"
        if args.sleep:
            time.sleep(args.sleep)
        sys.stdout.write(json.dumps({"type": "turn", "text": turn_text(t, action)}) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
