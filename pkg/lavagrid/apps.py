from django.apps import AppConfig


class LavagridConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'lavagrid'
    verbose_name = 'LavaGrid environment'
