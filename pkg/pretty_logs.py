# 🧵 pretty_logs : from pretty_logs import pretty_log

import os
import sys
import traceback
from datetime import datetime

# -------------------- 🧵 Mirror Log File --------------------
LOG_FILE: str | None = None


def set_log_file(path: str | None):
    """Mirror warn/error/critical lines into a plain-text log file (None disables)."""
    global LOG_FILE
    LOG_FILE = path
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


# -------------------- 🧵 Logging Tags --------------------
TAGS = {
    "info": "🧵 INFO",
    "ready": "✨ READY",
    "data": "👕 DATA",
    "render": "🎨 RENDER",
    "train": "🏋️ TRAIN",
    "ckpt": "💾 CKPT",
    "grad": "📐 GRAD",
    "metric": "📊 METRIC",
    "error": "💥 ERROR",
    "warn": "⚠️ WARN",
    "critical": "🚨 CRITICAL",
}


# -------------------- 🎨 ANSI Colors --------------------
COLOR_SOFT_LILAC = "\033[38;2;225;210;255m"  # 🧵 lilac (info/default)
COLOR_PEACH = "\033[38;2;255;220;180m"  # ⚠️ peach (warnings)
COLOR_SOFT_RED = "\033[38;2;255;150;150m"  # 💥 softer red (errors/critical)
COLOR_RESET = "\033[0m"

MAIN_COLORS = {
    "lilac": COLOR_SOFT_LILAC,
    "orange": COLOR_PEACH,
    "red": COLOR_SOFT_RED,
    "reset": COLOR_RESET,
}


# -------------------- 🌟 Pretty Log --------------------
def pretty_log(
    tag: str | None = None,
    message: str = "",
    *,
    label: str | None = None,
    include_trace: bool = True,
):
    """Tagged pretty log with timestamp + emoji, written to stderr."""
    prefix = TAGS.get(tag) if tag else ""
    prefix_part = f"[{prefix}] " if prefix else ""
    label_str = f"[{label}] " if label else ""

    # Pick color
    if tag in ("critical", "error"):
        color = MAIN_COLORS["red"]
    elif tag == "warn":
        color = MAIN_COLORS["orange"]
    else:
        color = MAIN_COLORS["lilac"]

    now = datetime.now().strftime("%H:%M:%S")
    log_message = f"{color}[{now}] {prefix_part}{label_str}{message}{MAIN_COLORS['reset']}"
    print(log_message, file=sys.stderr)

    # Traceback only exists inside an except block
    has_trace = include_trace and sys.exc_info()[0] is not None
    if has_trace and tag in ("error", "critical"):
        traceback.print_exc()

    # Mirror to the run's log file if needed
    if LOG_FILE and tag in ("critical", "error", "warn"):
        try:
            full_message = f"[{now}] {prefix_part}{label_str}{message}\n"
            if has_trace and tag in ("error", "critical"):
                full_message += traceback.format_exc()
            with open(LOG_FILE, "a", encoding="utf-8") as f:
                f.write(full_message)
        except Exception:
            print("[❌ ERROR] Failed to mirror log to file:", file=sys.stderr)
            traceback.print_exc()
