"""Server-side shared data sources with publish-subscribe."""

from typing import Any, Callable, Optional

from ..values import Val

Subscriber = Callable[[Val, Any], None]


class ServerSds:
    """One shared cell.  Writes carry an origin token so a subscriber
    can recognise (and not echo) its own updates."""

    def __init__(self, key: str, init: Val):
        self.key = key
        self.value = init
        self.version = 0
        self._subs: list[Subscriber] = []

    def read(self) -> Val:
        return self.value

    def write(self, val: Val, origin: Any = None) -> None:
        self.value = val
        self.version += 1
        for cb in list(self._subs):
            cb(val, origin)

    def subscribe(self, cb: Subscriber) -> Callable[[], None]:
        self._subs.append(cb)

        def cancel() -> None:
            if cb in self._subs:
                self._subs.remove(cb)
        return cancel


class SdsRegistry:
    """All shares the server knows, keyed by name.  Anonymous shares get
    synthesized tilde names so they still show up in listings."""

    def __init__(self) -> None:
        self.by_key: dict[str, ServerSds] = {}
        self._anon = 0

    def ensure(self, key: str, init: Val) -> ServerSds:
        """The share named key, created with init if new.  An existing
        share keeps its current value; the caller's init only seeds."""
        if not key:
            key = f"~{self._anon}"
            self._anon += 1
        sds = self.by_key.get(key)
        if sds is None:
            sds = ServerSds(key, init)
            self.by_key[key] = sds
        return sds

    def get(self, key: str) -> Optional[ServerSds]:
        return self.by_key.get(key)

    def drop(self, key: str) -> None:
        self.by_key.pop(key, None)

    def items(self):
        return sorted(self.by_key.items())
