import logging
from django.http import JsonResponse
from django.conf import settings
from django.utils import timezone
from django.utils.deprecation import MiddlewareMixin
from django.core.exceptions import ValidationError

from agents.exceptions import AgentError, CheckpointFormatError
from experiments.exceptions import AggregationError, ConfigError, ExperimentError
from lavagrid.exceptions import InstanceFormatError, LavaGridError
from pomdp.exceptions import PomdpError
from shields.exceptions import ShieldError, ShieldFormatError

logger = logging.getLogger(__name__)

BAD_INPUT_ERRORS = (ValidationError, ConfigError, ShieldFormatError, InstanceFormatError, CheckpointFormatError)
WORKBENCH_ERRORS = (PomdpError, ShieldError, LavaGridError, AgentError, ExperimentError)


class GlobalErrorHandlerMiddleware(MiddlewareMixin):
    """Middleware pour la gestion globale des erreurs"""

    def process_exception(self, request, exception):
        """Traite toutes les exceptions non gérées"""

        logger.error(f"Unhandled error on {request.path}: {exception}", exc_info=True)

        # Les erreurs hors workbench restent à Django en mode debug
        if settings.DEBUG and not isinstance(exception, WORKBENCH_ERRORS + BAD_INPUT_ERRORS):
            return None

        error_response = {
            'error': 'Internal error',
            'message': 'The request could not be completed',
            'timestamp': str(timezone.now())
        }

        if isinstance(exception, BAD_INPUT_ERRORS):
            error_response['error'] = 'Invalid input'
            error_response['message'] = str(exception)
            status_code = 400
        elif isinstance(exception, AggregationError):
            error_response['error'] = 'Aggregation failed'
            error_response['message'] = str(exception)
            status_code = 500
        elif isinstance(exception, WORKBENCH_ERRORS):
            error_response['error'] = type(exception).__name__
            error_response['message'] = str(exception)
            status_code = 500
        else:
            status_code = 500

        return JsonResponse(error_response, status=status_code)
