"""Server side: task engine, device endpoint, HTTP/WS front."""

from .api import create_app, serve_http
from .engine import DeviceHandle, Engine, EngineError
from .sds import SdsRegistry, ServerSds
from .stask import (ConstValue, DeviceProxy, Editor, Forever, Idle, MapValue,
                    OnAction, OnValue, ParAnd, ParLeft, ParOr, ParRight,
                    ShareValue, SNode, Step, WithShared)
from .workflows import (WORKFLOWS, MatrixModel, ServerAct, blink_workflow,
                        counter_workflow, demo_workflow, matrix_workflow,
                        thermostat_workflow)

__all__ = [
    "Engine", "EngineError", "DeviceHandle",
    "ServerSds", "SdsRegistry",
    "SNode", "ConstValue", "Idle", "Editor", "ParAnd", "ParOr", "ParLeft",
    "ParRight", "OnValue", "OnAction", "Step", "Forever", "MapValue",
    "ShareValue", "WithShared", "DeviceProxy",
    "create_app", "serve_http",
    "WORKFLOWS", "MatrixModel", "ServerAct", "thermostat_workflow",
    "blink_workflow", "matrix_workflow", "counter_workflow", "demo_workflow",
]
