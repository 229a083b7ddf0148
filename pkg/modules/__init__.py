# Modules package for Points2Sound
