from django.apps import AppConfig


class PomdpConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pomdp'
    verbose_name = 'POMDP-CA core'
