/* Minimal C client: bridge coefficients, a bridge draw and error reporting. */
#include <stdio.h>
#include "ibmd.h"

int main(void) {
    IbmdSchedule *s = NULL;
    if (ibmd_schedule_vp(0.1, 20.0, 1.0, &s) != IBMD_STATUS_OK) {
        fprintf(stderr, "schedule: %s\n", ibmd_last_error());
        return 1;
    }
    IbmdBridgeCoeffs c;
    if (ibmd_schedule_bridge_coeffs(s, 0.5, &c) != IBMD_STATUS_OK) {
        return 1;
    }
    printf("version %s a %.6f b %.6f c2 %.6f\n", ibmd_version(), c.a, c.b, c.c2);

    double x0[2] = {1.0, 2.0}, x_end[2] = {-1.0, -2.0}, t[1] = {1.0}, out[2];
    if (ibmd_bridge_sample(s, x0, x_end, t, 1, 2, 7, out) != IBMD_STATUS_OK || out[0] != -1.0 || out[1] != -2.0) {
        return 1;
    }

    IbmdStatus bad = ibmd_schedule_bridge_coeffs(s, 2.0, &c);
    printf("out of range: %s (%s)\n", ibmd_status_name(bad), ibmd_last_error());
    ibmd_schedule_free(s);
    return bad == IBMD_STATUS_DOMAIN ? 0 : 1;
}
