"""Virtual device hardware: pin banks, a DHT sensor, an 8x8 LED matrix.

This is the VM's world.  It is deliberately written apart from the
reference interpreter's world so the two execution routes stay
independent; equivalence tests compare their observable state.

Conventions:
- analog levels are stored clamped to 0..1023;
- a digital read of an analog pin thresholds at 512, a digital write to
  one drives it to 1023 or 0;
- DHT readings are integral deci-units (231 means 23.1);
- the matrix has a framebuffer that show() copies to the visible frame.
"""

from __future__ import annotations

ANALOG_MAX = 1023
DIGITAL_THRESHOLD = 512


class RangeFault(Exception):
    """A hardware access outside the board's limits.  The reason string
    is the task failure reason the runtime reports."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class VirtualBoard:
    def __init__(self, digital_pins: int = 16, analog_pins: int = 8,
                 matrix_w: int = 8, matrix_h: int = 8):
        self.digital = [False] * digital_pins
        self.analog = [0] * analog_pins
        self.temp_deci = 0
        self.hum_deci = 0
        self.matrix_w = matrix_w
        self.matrix_h = matrix_h
        self.framebuffer = [[False] * matrix_w for _ in range(matrix_h)]
        self.displayed = [[False] * matrix_w for _ in range(matrix_h)]
        self.intensity = 8
        self.write_log: list[tuple[int, str, int, object]] = []
        self.now = 0

    ### task-facing accessors

    def read_digital(self, bank: str, idx: int) -> bool:
        if bank == "a":
            self._a(idx)
            return self.analog[idx] >= DIGITAL_THRESHOLD
        self._d(idx)
        return self.digital[idx]

    def write_digital(self, bank: str, idx: int, val: bool) -> None:
        if bank == "a":
            self._a(idx)
            self.analog[idx] = ANALOG_MAX if val else 0
        else:
            self._d(idx)
            self.digital[idx] = val
        self.write_log.append((self.now, bank + "w", idx, val))

    def read_analog(self, idx: int) -> int:
        self._a(idx)
        return self.analog[idx]

    def write_analog(self, idx: int, val: int) -> None:
        self._a(idx)
        self.analog[idx] = max(0, min(ANALOG_MAX, val))
        self.write_log.append((self.now, "aw", idx, val))

    def dht_temp(self) -> int:
        return self.temp_deci

    def dht_humidity(self) -> int:
        return self.hum_deci

    def dot(self, x: int, y: int, on: bool) -> None:
        if not (0 <= x < self.matrix_w and 0 <= y < self.matrix_h):
            raise RangeFault("matrix-range")
        self.framebuffer[y][x] = on

    def set_intensity(self, level: int) -> None:
        if not (0 <= level <= 15):
            raise RangeFault("intensity-range")
        self.intensity = level

    def clear(self) -> None:
        for row in self.framebuffer:
            for x in range(self.matrix_w):
                row[x] = False

    def show(self) -> None:
        self.displayed = [list(row) for row in self.framebuffer]

    ### environment-facing input setters (simulator, tests)

    def set_digital_input(self, idx: int, val: bool) -> None:
        self._d(idx)
        self.digital[idx] = bool(val)

    def set_analog_input(self, idx: int, level: int) -> None:
        self._a(idx)
        if not (0 <= level <= ANALOG_MAX):
            raise ValueError(f"analog level {level} out of 0..{ANALOG_MAX}")
        self.analog[idx] = level

    def set_temperature(self, deci: int) -> None:
        self.temp_deci = int(deci)

    def set_humidity(self, deci: int) -> None:
        self.hum_deci = int(deci)

    def snapshot(self) -> dict:
        """Plain-data view of the whole board (for the simulator API)."""
        return {
            "now": self.now,
            "digital": list(self.digital),
            "analog": list(self.analog),
            "temperature": self.temp_deci,
            "humidity": self.hum_deci,
            "matrix": [[1 if px else 0 for px in row] for row in self.displayed],
            "intensity": self.intensity,
        }

    def _d(self, idx: int) -> None:
        if not (0 <= idx < len(self.digital)):
            raise RangeFault("pin-range")

    def _a(self, idx: int) -> None:
        if not (0 <= idx < len(self.analog)):
            raise RangeFault("pin-range")


__all__ = ["VirtualBoard", "RangeFault", "ANALOG_MAX", "DIGITAL_THRESHOLD"]
