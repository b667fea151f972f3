"""HTTP service exposing the training and evaluation pipeline.

The CLI is a thin client of this app; by default it mounts the app
in-process, but the same routes serve over the network via uvicorn.
"""

from .app import WORK_SUBDIRS, create_app, default_work_dir

__all__ = ["WORK_SUBDIRS", "create_app", "default_work_dir"]
