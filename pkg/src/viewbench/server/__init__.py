from .app import PROTOCOL_HEADER, SessionRegistry, create_app
from .client import EvaluationClient, RemoteError, RemoteHandle, run_remote

__all__ = ["PROTOCOL_HEADER", "EvaluationClient", "RemoteError", "RemoteHandle", "SessionRegistry", "create_app",
           "run_remote"]
