#include <math.h>
#include "gain_sum.h"

/* out[0]: s.out0 */

void gain_sum_init(gain_sum_state *st)
{
    st->s[0] = 0.0;
}

int gain_sum_step(gain_sum_state *st, const double *in, double *out)
{
    double r0, r1, r2, r3;
    (void)st;
    (void)in;
    (void)out;
    r0 = 5.0;
    r1 = 2.0;
    r2 = 0.5 * r0;
    r3 = r2 + r1;
    out[0] = r3;
    return 0;
}
