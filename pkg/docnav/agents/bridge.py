from __future__ import annotations

import base64
import io
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from PIL import Image

from docnav.agents.base import AgentPolicy
from docnav.corpus import Document, Page, QAItem
from docnav.environment import AugmentedObservation, InitialObservation, Observation
from docnav.log_helper import getLogger
from docnav.overview import OverviewImage
from docnav.protocol import Trajectory
from docnav.types import ImageMode
from docnav.wire import (
    DEFAULT_CONNECT_TIMEOUT,
    DEFAULT_TURN_TIMEOUT,
    ChannelPool,
    Endpoint,
    JsonLineChannel,
    TransportError,
)

"""
Agent bridge: observations go out as JSON lines, turn texts come back.

    -> {"type": "reset", "qa_id", "doc_id", "question", "budget", "page_count",
        "images": [{"role": "overview", "k": 1, "path" | "b64"}, ...]}
    <- {"type": "turn", "text": "<think>...</think><action>...</action>"}
    -> {"type": "feedback", "turn": t, "pages": [{"index", "label", "path" | "b64"}, ...],
        "reminders": [...], "format_notice": ..., "working_memory": "..."}
    <- {"type": "turn", "text": ...}
    -> {"type": "done", "qa_id", "outcome", "final_answer"}

Prompting is entirely the remote's business.
"""

log = getLogger("docnav.bridge")


def encode_png(img: Image.Image) -> str:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> Image.Image:
    return Image.open(io.BytesIO(base64.b64decode(data)))


class ImageSpool:
    """Turns rasters into wire references: a PNG file path written once, or inline base64."""

    def __init__(self, mode: ImageMode, image_dir: Optional[Path] = None):
        if mode is ImageMode.PATH and image_dir is None:
            raise ValueError("path image mode needs an image directory")
        self.mode = mode
        self.image_dir = image_dir
        self._lock = threading.Lock()

    def _ref(self, path_parts: Sequence[str], render) -> Dict[str, str]:
        if self.mode is ImageMode.B64:
            return {"b64": encode_png(render())}
        assert self.image_dir is not None
        path = self.image_dir.joinpath(*path_parts)
        with self._lock:
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                render().save(path, format="PNG")
        return {"path": str(path)}

    def page(self, doc_id: str, page: Page) -> Dict[str, str]:
        return self._ref((doc_id, f"page_{page.index:04d}.png"), page.image)

    def overview(self, doc_id: str, img: OverviewImage) -> Dict[str, str]:
        return self._ref((doc_id, f"overview_{img.group_index}.png"), lambda: img.composite)


def reset_message(obs: InitialObservation, spool: ImageSpool) -> Dict[str, Any]:
    images: List[Dict[str, Any]] = []
    if obs.overview is not None:
        for img in obs.overview.images:
            ref = spool.overview(obs.doc_id, img)
            images.append({"role": "overview", "k": img.group_index, **ref})
    return {
        "type": "reset",
        "qa_id": obs.qa_id,
        "doc_id": obs.doc_id,
        "question": obs.question,
        "budget": obs.budget,
        "page_count": obs.page_count,
        "images": images,
    }


def feedback_message(obs: AugmentedObservation, doc_id: str, spool: ImageSpool) -> Dict[str, Any]:
    return {
        "type": "feedback",
        "turn": obs.turn,
        "pages": [
            {"index": p.index, "label": p.label, **spool.page(doc_id, p.page)}
            for p in obs.feedback.pages
        ],
        "reminders": list(obs.feedback.reminders),
        "format_notice": obs.feedback.format_notice,
        "working_memory": obs.working_memory,
    }


class BridgeAgent(AgentPolicy):
    """Forwards observations to a remote agent and returns its turn text verbatim.
    The connection is taken from the pool on start(), so connect failures abort only
    this episode."""

    def __init__(
        self, pool: ChannelPool, spool: ImageSpool, turn_timeout: float = DEFAULT_TURN_TIMEOUT
    ):
        self.pool = pool
        self.spool = spool
        self.turn_timeout = turn_timeout
        self.doc_id = ""
        self._channel: Optional[JsonLineChannel] = None
        self._broken = False

    def start(self, observation: InitialObservation):
        self.doc_id = observation.doc_id
        self._channel = self.pool.acquire()

    def _request_turn(self, msg: Dict[str, Any]) -> str:
        assert self._channel is not None
        try:
            reply = self._channel.request(msg, expect="turn", timeout=self.turn_timeout)
        except TransportError:
            self._broken = True
            raise
        text = reply.get("text")
        if not isinstance(text, str):
            self._broken = True
            raise TransportError(f"{self._channel.name}: turn message without text")
        return text

    def act(self, observation: Observation, history: Sequence[str]) -> str:
        if isinstance(observation, InitialObservation):
            return self._request_turn(reset_message(observation, self.spool))
        return self._request_turn(feedback_message(observation, self.doc_id, self.spool))

    def finish(self, trajectory: Trajectory):
        assert self._channel is not None
        try:
            self._channel.send(
                {
                    "type": "done",
                    "qa_id": trajectory.qa_id,
                    "outcome": str(trajectory.terminated_by),
                    "final_answer": trajectory.final_answer,
                }
            )
        except TransportError as e:
            log.warning(f"could not deliver episode end for {trajectory.qa_id}: {e}")
            self._broken = True

    def close(self):
        if self._channel is not None:
            self.pool.release(self._channel, broken=self._broken)
            self._channel = None


class BridgeAgentFactory:
    def __init__(
        self,
        endpoint: Endpoint,
        image_mode: ImageMode = ImageMode.PATH,
        image_dir: Optional[Path] = None,
        connect_timeout: float = DEFAULT_CONNECT_TIMEOUT,
        turn_timeout: float = DEFAULT_TURN_TIMEOUT,
    ):
        self.pool = ChannelPool(endpoint, connect_timeout)
        self.spool = ImageSpool(image_mode, image_dir)
        self.turn_timeout = turn_timeout

    def __call__(self, doc: Document, qa: QAItem) -> AgentPolicy:
        return BridgeAgent(self.pool, self.spool, self.turn_timeout)

    def close(self):
        log.debug(f"closing bridge connections to {self.pool.endpoint}")
        self.pool.close()
