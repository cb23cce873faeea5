"""pytest wiring: configure Django the same way `manage.py test` does."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'dp_defence.settings')
django.setup()
