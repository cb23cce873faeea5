#!/usr/bin/env python
"""Project commands: `python manage.py test` and the fence subcommands (`synth`, `segment`, ...)."""
import os
import sys

from django.core.management import execute_from_command_line


if __name__ == '__main__':
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'dp_defence.settings')
    execute_from_command_line(sys.argv)
