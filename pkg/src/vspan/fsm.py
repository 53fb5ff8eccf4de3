"""A small deterministic state-machine engine.

A machine is the sextuple (states, event classes, actions, accepting states,
initial state, transition table). Event classes are predicates over
``(bindings, event)`` so that a rule can compare an event field against a
value captured by an earlier transition. Events that match no rule from the
current state are skipped, which is what lets one merged stream drive many
interleaved machines.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, NamedTuple, Optional

from .errors import MachineDefinitionError, NondeterministicMatch

Bindings = dict[str, Any]
Predicate = Callable[[Mapping[str, Any], Any], bool]
Binder = Callable[[Mapping[str, Any], Any], Optional[Mapping[str, Any]]]


@dataclass(frozen=True)
class Rule:
    """Right-hand side of a transition: next state, action and an optional
    binding directive returning values to capture."""

    next_state: Hashable
    action: Hashable
    bind: Binder | None = None


class Step(NamedTuple):
    state: Hashable
    action: Hashable


@dataclass(frozen=True)
class StateMachineDef:
    states: frozenset
    event_classes: Mapping[Hashable, Predicate]
    actions: frozenset
    accepting: frozenset
    initial: Hashable
    transitions: Mapping[tuple[Hashable, Hashable], Rule]
    _by_state: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.initial not in self.states:
            raise MachineDefinitionError(f"initial state {self.initial!r} not in state space")
        if not self.accepting <= self.states:
            raise MachineDefinitionError("accepting states must be a subset of the state space")
        by_state: dict[Hashable, list[tuple[Hashable, Predicate, Rule]]] = {}
        for (state, cls), rule in self.transitions.items():
            if state not in self.states:
                raise MachineDefinitionError(f"transition from unknown state {state!r}")
            if cls not in self.event_classes:
                raise MachineDefinitionError(f"transition on unknown event class {cls!r}")
            if rule.next_state not in self.states:
                raise MachineDefinitionError(f"transition to unknown state {rule.next_state!r}")
            if rule.action not in self.actions:
                raise MachineDefinitionError(f"unknown action {rule.action!r}")
            by_state.setdefault(state, []).append((cls, self.event_classes[cls], rule))
        object.__setattr__(self, "_by_state", by_state)

    @classmethod
    def build(cls, *, initial, transitions, event_classes, accepting=(), states=None, actions=None):
        """Infer the state and action spaces from the transition table when not given."""
        table = {k: v if isinstance(v, Rule) else Rule(*v) for k, v in transitions.items()}
        if states is None:
            states = {initial} | {s for s, _ in table} | {r.next_state for r in table.values()}
        if actions is None:
            actions = {r.action for r in table.values()}
        return cls(frozenset(states), dict(event_classes), frozenset(actions),
                   frozenset(accepting), initial, table)

    def rules_from(self, state) -> list[tuple[Hashable, Predicate, Rule]]:
        return self._by_state.get(state, [])

    def start(self, **bindings) -> "MachineRun":
        return MachineRun(self, self.initial, dict(bindings))


@dataclass
class MachineRun:
    definition: StateMachineDef
    current: Hashable
    bindings: Bindings = field(default_factory=dict)
    trace_positions: list[tuple[int, Hashable, Hashable]] = field(default_factory=list)
    events_seen: int = 0

    def match(self, ev) -> tuple[Hashable, Rule] | None:
        """The single matching (class, rule) from the current state, if any."""
        found = None
        bindings = self.bindings
        for cls, pred, rule in self.definition.rules_from(self.current):
            if pred(bindings, ev):
                if found is not None:
                    raise NondeterministicMatch(
                        f"event matches both {found[0]!r} and {cls!r} in state {self.current!r}")
                found = (cls, rule)
        return found

    def step(self, ev) -> Step | None:
        """Advance on *ev*; returns the (new state, action) or ``None`` when no
        rule applies (the run is then left untouched apart from its event
        counter)."""
        index = self.events_seen
        self.events_seen += 1
        hit = self.match(ev)
        if hit is None:
            return None
        rule = hit[1]
        if rule.bind is not None:
            captured = rule.bind(self.bindings, ev)
            if captured:
                self.bindings.update(captured)
        self.current = rule.next_state
        self.trace_positions.append((index, rule.next_state, rule.action))
        return Step(rule.next_state, rule.action)

    def is_accepting(self) -> bool:
        return self.current in self.definition.accepting


def step(run: MachineRun, ev) -> Step | None:
    return run.step(ev)


def is_accepting(run: MachineRun) -> bool:
    return run.is_accepting()


def run_sequence(definition: StateMachineDef, events: Iterable[Any]) -> tuple[list, list]:
    """Fold *events* through a fresh run.

    Returns ``(states, actions)`` where ``states`` starts with the initial
    state and gains one entry per transition taken.
    """
    run = definition.start()
    states = [run.current]
    actions = []
    for ev in events:
        moved = run.step(ev)
        if moved is not None:
            states.append(moved.state)
            actions.append(moved.action)
    return states, actions
