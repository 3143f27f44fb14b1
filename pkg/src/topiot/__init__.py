"""Task-oriented programming for microcontrollers: a task description
language with a reference interpreter, a compact bytecode, a device VM,
a wire protocol, a simulated device, and a server-side task engine."""

__version__ = "0.1.0"
