"""Simulated neighbour-only message passing with per-round barriers and auditing."""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from nashlearn.errors import LocalityViolation

logger = logging.getLogger(__name__)


def payload_size(payload):
    """Size in bytes of an opaque payload of arrays, numbers and containers."""
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return payload.nbytes
    if isinstance(payload, (bytes, bytearray)):
        return len(payload)
    if isinstance(payload, str):
        return len(payload.encode("utf8"))
    if isinstance(payload, dict):
        return sum(payload_size(v) for v in payload.values())
    if isinstance(payload, (list, tuple)):
        return sum(payload_size(v) for v in payload)
    return np.asarray(payload).nbytes


@dataclass
class RoundMailbox:
    round: int
    messages: Dict[Tuple[int, int], Any] = field(default_factory=dict)


class MessageAudit:
    """Per-link message totals; memory grows with the number of links, not of rounds."""

    def __init__(self):
        self.counts = defaultdict(int)
        self.bytes = defaultdict(int)
        self.violations = []
        self.links = {}

    def record(self, round_, sender, receiver, size):
        edge = (min(sender, receiver), max(sender, receiver))
        self.counts[edge] += 1
        self.bytes[edge] += size
        link = self.links.get((sender, receiver))
        if link is None:
            link = self.links[(sender, receiver)] = {
                "sender": sender,
                "receiver": receiver,
                "messages": 0,
                "bytes": 0,
                "first_round": round_,
                "last_round": round_,
            }
        link["messages"] += 1
        link["bytes"] += size
        link["last_round"] = round_

    @property
    def total_messages(self):
        return sum(self.counts.values())

    @property
    def total_bytes(self):
        return sum(self.bytes.values())

    def to_table(self):
        return [dict(self.links[key]) for key in sorted(self.links)]

    def to_json(self):
        return {
            "messages": self.total_messages,
            "bytes": self.total_bytes,
            "edges": {"{}-{}".format(*e): c for e, c in sorted(self.counts.items())},
            "violations": [
                {"sender": v["sender"], "receiver": v["receiver"], "round": v["round"]}
                for v in self.violations
            ],
        }


class CommFabric:
    """Bulk-synchronous exchange over the edges of a ``CommGraph``.

    In strict mode a message addressed to a non-neighbour raises
    ``LocalityViolation`` before anything is delivered. Otherwise the
    violation is recorded in ``audit.violations`` and the message dropped.
    """

    def __init__(self, graph, strict=True, workers=1):
        self.graph = graph
        self.strict = strict
        self.workers = workers
        self.round = 0
        self.audit = MessageAudit()
        self.mailbox = None

    def exchange(self, outbound):
        round_ = self.round + 1
        mailbox = RoundMailbox(round_)
        for sender in sorted(outbound):
            for receiver in sorted(outbound[sender]):
                if not self.graph.has_edge(sender, receiver):
                    error = LocalityViolation(sender, receiver, round_)
                    if self.strict:
                        raise error
                    logger.warning(str(error))
                    self.audit.violations.append(
                        {
                            "error": error,
                            "sender": sender,
                            "receiver": receiver,
                            "round": round_,
                        }
                    )
                    continue
                mailbox.messages[(sender, receiver)] = outbound[sender][receiver]

        # barrier: nothing is readable until every robot has delivered
        inbound = {i: {} for i in self.graph.nodes}
        for (sender, receiver), payload in mailbox.messages.items():
            inbound[receiver][sender] = payload
            self.audit.record(round_, sender, receiver, payload_size(payload))
        self.round = round_
        self.mailbox = mailbox
        return inbound

    def broadcast(self, values):
        """Send each robot's value to all of its neighbours."""
        return self.exchange(
            {i: {j: values[i] for j in self.graph.neighbors(i)} for i in values}
        )

    def map(self, fn, ids=None):
        """Run ``fn(i)`` for every robot; results are keyed by robot id."""
        ids = list(self.graph.nodes if ids is None else ids)
        if self.workers <= 1 or len(ids) <= 1:
            return {i: fn(i) for i in ids}
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            results = list(pool.map(fn, ids))
        return dict(zip(ids, results))

    def max_consensus(self, values):
        """Flood the maximum of ``values`` over the graph in ``m - 1`` rounds."""
        current = dict(values)
        for _ in range(max(self.graph.m - 1, 0)):
            inbound = self.broadcast(current)
            current = {
                i: max([current[i]] + list(inbound[i].values())) for i in current
            }
        return current

    def __repr__(self):
        return "<CommFabric round={} strict={} messages={}>".format(
            self.round, self.strict, self.audit.total_messages
        )
