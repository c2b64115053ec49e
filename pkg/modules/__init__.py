# 召回与重排各子系统
