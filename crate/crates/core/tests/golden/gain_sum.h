#ifndef GAIN_SUM_H
#define GAIN_SUM_H

#define GAIN_SUM_INPUTS 0
#define GAIN_SUM_OUTPUTS 1
#define GAIN_SUM_STATES 0

typedef struct {
    double s[1];
} gain_sum_state;

void gain_sum_init(gain_sum_state *st);
int gain_sum_step(gain_sum_state *st, const double *in, double *out);

#endif
