from django.contrib import admin
from .models import ExperimentRun, EpisodeMetric


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['name', 'protocol', 'seed', 'total_mistakes', 'repeated_mistakes', 'created_at']
    list_filter = ['protocol']
    search_fields = ['name', 'config_digest']


admin.site.register(EpisodeMetric)
