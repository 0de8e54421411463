#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""core/logger.py - console logging shared by every stage."""

from __future__ import annotations

import sys
import threading
from datetime import datetime


def _supports_tty(stream: object) -> bool:
    try:
        return bool(stream) and bool(getattr(stream, 'isatty', lambda: False)())
    except Exception:
        return False


_COLOR_ENABLED = _supports_tty(sys.stderr)
COLOR_RED = '\033[91m' if _COLOR_ENABLED else ''
COLOR_YELLOW = '\033[93m' if _COLOR_ENABLED else ''
COLOR_WHITE = '\033[0m' if _COLOR_ENABLED else ''
COLOR_RESET = '\033[0m' if _COLOR_ENABLED else ''

print_lock = threading.Lock()
_status_line = ''
_quiet = False


def set_quiet(quiet: bool) -> None:
    """Silence info/status output (warnings and errors still print)."""
    global _quiet
    _quiet = bool(quiet)


def _get_timestamp() -> str:
    return datetime.now().strftime('%Y-%m-%d %H:%M:%S')


def _safe_print(text: str, *, end: str = '\n', flush: bool = False) -> None:
    # stdout stays reserved for machine-readable command output
    stream = sys.stderr or sys.__stderr__
    if stream is None:
        return
    try:
        print(text, end=end, flush=flush, file=stream)
    except Exception:
        pass


def _emit(text: str) -> None:
    with print_lock:
        if _status_line:
            _safe_print('\r' + ' ' * len(_status_line), end='\r', flush=True)
        _safe_print(text)
        if _status_line:
            _safe_print('\r' + _status_line, end='', flush=True)


def console_info(text: str) -> None:
    if _quiet:
        return
    _emit(f'{COLOR_WHITE}[INFO] {text}{COLOR_RESET}')


def console_warn(text: str) -> None:
    _emit(f'{COLOR_YELLOW}{_get_timestamp()} [WARN] {text}{COLOR_RESET}')


def console_error(text: str) -> None:
    _emit(f'{COLOR_RED}{_get_timestamp()} [ERROR] {text}{COLOR_RESET}')


def console_status(text: str) -> None:
    global _status_line
    if _quiet:
        return
    with print_lock:
        padding = max(0, len(_status_line) - len(text))
        _status_line = text
        _safe_print('\r' + text + ' ' * padding, end='', flush=True)


def console_status_done() -> None:
    """Terminate the in-place status line so later output starts clean."""
    global _status_line
    with print_lock:
        if _status_line and not _quiet:
            _safe_print('', flush=True)
        _status_line = ''
