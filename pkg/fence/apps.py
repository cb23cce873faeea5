from django.apps import AppConfig


class FenceConfig(AppConfig):
    name = 'fence'
    verbose_name = 'Dual-pixel fence removal'
