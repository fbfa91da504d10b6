"""
Logging setup
One stderr handler on the eegpipe logger, as plain text or one JSON object
per line.
"""
import json
import logging
import sys

TEXT_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Attributes present on every LogRecord; anything else came in through extra=
_RESERVED = set(vars(logging.LogRecord('', 0, '', 0, '', (), None))) | {'message', 'asctime'}


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record, carrying any extra= fields"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            'ts': self.formatTime(record, '%Y-%m-%dT%H:%M:%S'),
            'level': record.levelname,
            'logger': record.name,
            'msg': record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED and not key.startswith('_'):
                payload[key] = value
        if record.exc_info:
            payload['exc'] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, sort_keys=True)


def configure_logging(level: str = 'INFO', fmt: str = 'text') -> None:
    """Install a single stderr handler on the eegpipe logger"""
    root = logging.getLogger('eegpipe')
    root.setLevel(level.upper())
    for handler in list(root.handlers):
        root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    if fmt == 'json':
        handler.setFormatter(JsonLineFormatter())
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))
    root.addHandler(handler)
    root.propagate = False
